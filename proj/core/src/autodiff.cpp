#include "demist/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include <Eigen/Core>

#include "demist/errors.hpp"

namespace demist {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;
using MapV = Eigen::Map<Eigen::VectorXf>;
using CMapV = Eigen::Map<const Eigen::VectorXf>;

// Reusable scratch for im2col buffers. Ops run sequentially within a
// thread, so two pools are enough (forward column + backward column).
std::vector<float>& scratch(int which) {
  static thread_local std::vector<float> pools[2];
  return pools[which];
}

float* grab(int which, std::int64_t n) {
  auto& pool = scratch(which);
  if (static_cast<std::int64_t>(pool.size()) < n) pool.resize(static_cast<std::size_t>(n));
  return pool.data();
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->parents = std::move(parents);
  for (const Var& p : node->parents) {
    if (p->requires_grad) {
      node->requires_grad = true;
      break;
    }
  }
  if (node->requires_grad) node->backprop = std::move(backprop);
  return node;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a->value.shape_str() + " vs " +
                     b->value.shape_str());
  }
}

// im2col over NHWC with zero padding. Returns rows = B*Ho*Wo, each row
// the K*K*C window in (kh, kw, c) order. Interior rows collapse to one
// memcpy per kh because source and destination are both contiguous in
// (kw, c).
void im2col(const Tensor& x, int kernel, int stride, int pad, int ho, int wo, float* col) {
  const int b_n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int row_len = kernel * kernel * c;
  const float* src = x.data();
  for (int b = 0; b < b_n; ++b) {
    const float* xb = src + static_cast<std::int64_t>(b) * h * w * c;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        float* row = col + (static_cast<std::int64_t>(b) * ho * wo + static_cast<std::int64_t>(oy) * wo + ox) * row_len;
        const int iy0 = oy * stride - pad;
        const int ix0 = ox * stride - pad;
        for (int kh = 0; kh < kernel; ++kh) {
          const int iy = iy0 + kh;
          float* dst = row + kh * kernel * c;
          if (iy < 0 || iy >= h) {
            std::memset(dst, 0, sizeof(float) * static_cast<std::size_t>(kernel) * c);
            continue;
          }
          if (ix0 >= 0 && ix0 + kernel <= w) {
            std::memcpy(dst, xb + (static_cast<std::int64_t>(iy) * w + ix0) * c,
                        sizeof(float) * static_cast<std::size_t>(kernel) * c);
          } else {
            for (int kw = 0; kw < kernel; ++kw) {
              const int ix = ix0 + kw;
              if (ix < 0 || ix >= w) {
                std::memset(dst + kw * c, 0, sizeof(float) * static_cast<std::size_t>(c));
              } else {
                std::memcpy(dst + kw * c, xb + (static_cast<std::int64_t>(iy) * w + ix) * c,
                            sizeof(float) * static_cast<std::size_t>(c));
              }
            }
          }
        }
      }
    }
  }
}

// Scatter-add of column gradients back into the input gradient.
void col2im_add(const float* col, int kernel, int stride, int pad, int ho, int wo,
                Tensor& dx) {
  const int b_n = dx.dim(0), h = dx.dim(1), w = dx.dim(2), c = dx.dim(3);
  const int row_len = kernel * kernel * c;
  for (int b = 0; b < b_n; ++b) {
    float* xb = dx.data() + static_cast<std::int64_t>(b) * h * w * c;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const float* row = col + (static_cast<std::int64_t>(b) * ho * wo + static_cast<std::int64_t>(oy) * wo + ox) * row_len;
        const int iy0 = oy * stride - pad;
        const int ix0 = ox * stride - pad;
        for (int kh = 0; kh < kernel; ++kh) {
          const int iy = iy0 + kh;
          if (iy < 0 || iy >= h) continue;
          for (int kw = 0; kw < kernel; ++kw) {
            const int ix = ix0 + kw;
            if (ix < 0 || ix >= w) continue;
            float* dst = xb + (static_cast<std::int64_t>(iy) * w + ix) * c;
            const float* s = row + (kh * kernel + kw) * c;
            for (int i = 0; i < c; ++i) dst[i] += s[i];
          }
        }
      }
    }
  }
}

}  // namespace

void Node::ensure_grad() {
  if (grad.empty() && value.size() > 0) grad = Tensor(value.shape());
}

void Node::accumulate(const float* g, std::int64_t n) {
  ensure_grad();
  float* dst = grad.data();
  for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

void Node::accumulate_scaled(const float* g, std::int64_t n, float scale) {
  ensure_grad();
  float* dst = grad.data();
  for (std::int64_t i = 0; i < n; ++i) dst[i] += scale * g[i];
}

Var make_leaf(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return node;
}

Var make_constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = false;
  return node;
}

void backward(const Var& root) {
  require(root != nullptr, "backward: null root");
  require(root->value.size() == 1, "backward: root must be scalar");
  if (!root->requires_grad) return;

  // Post-order DFS: parents precede consumers, so the reversed list runs
  // consumers first.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next].get();
      ++next;
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop && !node->grad.empty()) node->backprop(*node);
  }
}

// --- elementwise ------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a->value[i] + b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    const std::int64_t n = self.value.size();
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad.data(), n);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(self.grad.data(), n);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a->value[i] - b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    const std::int64_t n = self.value.size();
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad.data(), n);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate_scaled(self.grad.data(), n, -1.f);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a->value[i] * b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    const std::int64_t n = self.value.size();
    Node* a = self.parents[0].get();
    Node* b = self.parents[1].get();
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) a->grad[i] += self.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) b->grad[i] += self.grad[i] * a->value[i];
    }
  });
}

Var relu(const Var& x) {
  Tensor out(x->value.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = x->value[i] > 0.f ? x->value[i] : 0.f;
  return make_node(std::move(out), {x}, [](Node& self) {
    Node* x = self.parents[0].get();
    x->ensure_grad();
    const std::int64_t n = self.value.size();
    for (std::int64_t i = 0; i < n; ++i) {
      if (self.value[i] > 0.f) x->grad[i] += self.grad[i];
    }
  });
}

Var tanh_op(const Var& x) {
  Tensor out(x->value.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = std::tanh(x->value[i]);
  return make_node(std::move(out), {x}, [](Node& self) {
    Node* x = self.parents[0].get();
    x->ensure_grad();
    const std::int64_t n = self.value.size();
    for (std::int64_t i = 0; i < n; ++i) {
      const float y = self.value[i];
      x->grad[i] += self.grad[i] * (1.f - y * y);
    }
  });
}

Var softplus(const Var& x) {
  Tensor out(x->value.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) {
    const float v = x->value[i];
    out[i] = v > 20.f ? v : std::log1p(std::exp(v));
  }
  return make_node(std::move(out), {x}, [](Node& self) {
    Node* x = self.parents[0].get();
    x->ensure_grad();
    const std::int64_t n = self.value.size();
    for (std::int64_t i = 0; i < n; ++i) {
      const float v = x->value[i];
      const float sig = v > 20.f ? 1.f : 1.f / (1.f + std::exp(-v));
      x->grad[i] += self.grad[i] * sig;
    }
  });
}

Var affine(const Var& x, float scale, float shift) {
  Tensor out(x->value.shape());
  const std::int64_t n = out.size();
  for (std::int64_t i = 0; i < n; ++i) out[i] = scale * x->value[i] + shift;
  return make_node(std::move(out), {x}, [scale](Node& self) {
    self.parents[0]->accumulate_scaled(self.grad.data(), self.value.size(), scale);
  });
}

// --- structure --------------------------------------------------------

Var reshape(const Var& x, std::vector<int> shape) {
  require(shape_size(shape) == x->value.size(),
          "reshape: size mismatch " + x->value.shape_str() + " -> " + shape_to_string(shape));
  Tensor reshaped = Tensor::from(
      std::move(shape), std::vector<float>(x->value.data(), x->value.data() + x->value.size()));
  return make_node(std::move(reshaped), {x}, [](Node& self) {
    self.parents[0]->accumulate(self.grad.data(), self.value.size());
  });
}

Var broadcast_batch(const Var& x, int batch) {
  require(batch >= 1, "broadcast_batch: batch must be >= 1");
  std::vector<int> shape = x->value.shape();
  shape.insert(shape.begin(), batch);
  Tensor out(shape);
  const std::int64_t n = x->value.size();
  for (int b = 0; b < batch; ++b) {
    std::memcpy(out.data() + static_cast<std::int64_t>(b) * n, x->value.data(),
                sizeof(float) * static_cast<std::size_t>(n));
  }
  return make_node(std::move(out), {x}, [batch, n](Node& self) {
    Node* x = self.parents[0].get();
    x->ensure_grad();
    for (int b = 0; b < batch; ++b) {
      const float* g = self.grad.data() + static_cast<std::int64_t>(b) * n;
      for (std::int64_t i = 0; i < n; ++i) x->grad[i] += g[i];
    }
  });
}

Var add_rows(const Var& x, const Var& rows) {
  require(x->value.rank() >= 2, "add_rows: x must have rank >= 2");
  const std::int64_t n = rows->value.size();
  require(x->value.size() % n == 0, "add_rows: row block does not tile x");
  const int reps = static_cast<int>(x->value.size() / n);
  {
    // The trailing dims of x must match rows exactly.
    const auto& xs = x->value.shape();
    const auto& rs = rows->value.shape();
    require(xs.size() >= rs.size(), "add_rows: rank mismatch");
    for (std::size_t i = 0; i < rs.size(); ++i) {
      require(xs[xs.size() - rs.size() + i] == rs[i], "add_rows: trailing dims mismatch");
    }
  }
  Tensor out(x->value.shape());
  for (int r = 0; r < reps; ++r) {
    const float* xb = x->value.data() + static_cast<std::int64_t>(r) * n;
    float* ob = out.data() + static_cast<std::int64_t>(r) * n;
    for (std::int64_t i = 0; i < n; ++i) ob[i] = xb[i] + rows->value[i];
  }
  return make_node(std::move(out), {x, rows}, [reps, n](Node& self) {
    Node* x = self.parents[0].get();
    Node* rows = self.parents[1].get();
    if (x->requires_grad) x->accumulate(self.grad.data(), self.value.size());
    if (rows->requires_grad) {
      rows->ensure_grad();
      for (int r = 0; r < reps; ++r) {
        const float* g = self.grad.data() + static_cast<std::int64_t>(r) * n;
        for (std::int64_t i = 0; i < n; ++i) rows->grad[i] += g[i];
      }
    }
  });
}

Var upsample_nearest2(const Var& x) {
  require(x->value.rank() == 4, "upsample_nearest2: expected [B,H,W,C]");
  const int b_n = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2), c = x->value.dim(3);
  Tensor out({b_n, 2 * h, 2 * w, c});
  for (int b = 0; b < b_n; ++b) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        const float* s = &x->value.at(b, y, xx, 0);
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            std::memcpy(&out.at(b, 2 * y + dy, 2 * xx + dx, 0), s,
                        sizeof(float) * static_cast<std::size_t>(c));
          }
        }
      }
    }
  }
  return make_node(std::move(out), {x}, [b_n, h, w, c](Node& self) {
    Node* x = self.parents[0].get();
    x->ensure_grad();
    for (int b = 0; b < b_n; ++b) {
      for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
          float* d = &x->grad.at(b, y, xx, 0);
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const float* g = &self.grad.at(b, 2 * y + dy, 2 * xx + dx, 0);
              for (int i = 0; i < c; ++i) d[i] += g[i];
            }
          }
        }
      }
    }
  });
}

// --- linear algebra ---------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require(a->value.rank() == 2 && b->value.rank() == 2, "matmul: expected 2D tensors");
  const int m = a->value.dim(0), k = a->value.dim(1);
  require(b->value.dim(0) == k, "matmul: inner dims differ");
  const int n = b->value.dim(1);
  Tensor out({m, n});
  CMapM A(a->value.data(), m, k), B(b->value.data(), k, n);
  MapM(out.data(), m, n).noalias() = A * B;
  return make_node(std::move(out), {a, b}, [m, k, n](Node& self) {
    Node* a = self.parents[0].get();
    Node* b = self.parents[1].get();
    CMapM G(self.grad.data(), m, n);
    if (a->requires_grad) {
      a->ensure_grad();
      CMapM B(b->value.data(), k, n);
      MapM(a->grad.data(), m, k).noalias() += G * B.transpose();
    }
    if (b->requires_grad) {
      b->ensure_grad();
      CMapM A(a->value.data(), m, k);
      MapM(b->grad.data(), k, n).noalias() += A.transpose() * G;
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require(w->value.rank() == 2, "linear: weight must be 2D");
  const int cin = w->value.dim(0), cout = w->value.dim(1);
  require(x->value.rank() >= 1 && x->value.shape().back() == cin,
          "linear: last dim of x must equal weight rows");
  require(b->value.size() == cout, "linear: bias size mismatch");
  const std::int64_t rows = x->value.size() / cin;
  std::vector<int> out_shape = x->value.shape();
  out_shape.back() = cout;
  Tensor out(out_shape);
  CMapM X(x->value.data(), rows, cin), W(w->value.data(), cin, cout);
  MapM Y(out.data(), rows, cout);
  Y.noalias() = X * W;
  Y.rowwise() += CMapV(b->value.data(), cout).transpose();
  return make_node(std::move(out), {x, w, b}, [rows, cin, cout](Node& self) {
    Node* x = self.parents[0].get();
    Node* w = self.parents[1].get();
    Node* b = self.parents[2].get();
    CMapM G(self.grad.data(), rows, cout);
    if (x->requires_grad) {
      x->ensure_grad();
      CMapM W(w->value.data(), cin, cout);
      MapM(x->grad.data(), rows, cin).noalias() += G * W.transpose();
    }
    if (w->requires_grad) {
      w->ensure_grad();
      CMapM X(x->value.data(), rows, cin);
      MapM(w->grad.data(), cin, cout).noalias() += X.transpose() * G;
    }
    if (b->requires_grad) {
      b->ensure_grad();
      MapV(b->grad.data(), cout) += G.colwise().sum().transpose();
    }
  });
}

namespace {

// Row softmax into dst; numerically stable.
void softmax_row(const float* src, float* dst, int n) {
  float mx = src[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, src[i]);
  float sum = 0.f;
  for (int i = 0; i < n; ++i) {
    dst[i] = std::exp(src[i] - mx);
    sum += dst[i];
  }
  const float inv = 1.f / sum;
  for (int i = 0; i < n; ++i) dst[i] *= inv;
}

}  // namespace

Var softmax_rows(const Var& x) {
  require(x->value.rank() == 2, "softmax_rows: expected 2D tensor");
  const int m = x->value.dim(0), n = x->value.dim(1);
  Tensor out({m, n});
  for (int r = 0; r < m; ++r) softmax_row(x->value.data() + r * n, out.data() + r * n, n);
  return make_node(std::move(out), {x}, [m, n](Node& self) {
    Node* x = self.parents[0].get();
    x->ensure_grad();
    for (int r = 0; r < m; ++r) {
      const float* y = self.value.data() + r * n;
      const float* g = self.grad.data() + r * n;
      float dot = 0.f;
      for (int i = 0; i < n; ++i) dot += y[i] * g[i];
      float* d = x->grad.data() + r * n;
      for (int i = 0; i < n; ++i) d[i] += y[i] * (g[i] - dot);
    }
  });
}

Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads, float scale,
                        AttnProbe* probe) {
  require(q->value.rank() == 3 && k->value.rank() == 3 && v->value.rank() == 3,
          "attention: q/k/v must be [B,L,C]");
  const int b_n = q->value.dim(0);
  const int lq = q->value.dim(1), lk = k->value.dim(1);
  const int c = q->value.dim(2);
  require(k->value.dim(0) == b_n && v->value.dim(0) == b_n, "attention: batch mismatch");
  require(k->value.dim(2) == c && v->value.dim(2) == c, "attention: channel mismatch");
  require(v->value.dim(1) == lk, "attention: key/value length mismatch");
  require(heads >= 1 && c % heads == 0, "attention: heads must divide channels");
  const int hd = c / heads;

  auto slice_head = [hd, c](const Tensor& t, int b, int l, int head, MatRM& out) {
    out.resize(l, hd);
    for (int i = 0; i < l; ++i) {
      std::memcpy(out.data() + static_cast<std::int64_t>(i) * hd,
                  t.data() + ((static_cast<std::int64_t>(b) * t.dim(1) + i) * c + head * hd),
                  sizeof(float) * static_cast<std::size_t>(hd));
    }
  };

  Tensor out({b_n, lq, c});
  // Keep the probability matrices for the backward pass.
  auto saved = std::make_shared<std::vector<MatRM>>();
  saved->reserve(static_cast<std::size_t>(b_n) * heads);
  if (probe) probe->probs.clear();

  MatRM qh, kh, vh;
  for (int b = 0; b < b_n; ++b) {
    for (int head = 0; head < heads; ++head) {
      slice_head(q->value, b, lq, head, qh);
      slice_head(k->value, b, lk, head, kh);
      slice_head(v->value, b, lk, head, vh);
      MatRM s = (qh * kh.transpose()) * scale;
      MatRM p(lq, lk);
      for (int r = 0; r < lq; ++r) softmax_row(s.data() + r * lk, p.data() + r * lk, lk);
      MatRM o = p * vh;
      for (int i = 0; i < lq; ++i) {
        std::memcpy(out.data() + ((static_cast<std::int64_t>(b) * lq + i) * c + head * hd),
                    o.data() + static_cast<std::int64_t>(i) * hd,
                    sizeof(float) * static_cast<std::size_t>(hd));
      }
      if (probe) {
        probe->probs.push_back(Tensor::from({lq, lk}, std::vector<float>(p.data(), p.data() + p.size())));
      }
      saved->push_back(std::move(p));
    }
  }

  return make_node(std::move(out), {q, k, v},
                   [b_n, lq, lk, c, heads, hd, scale, saved, slice_head](Node& self) {
    Node* q = self.parents[0].get();
    Node* k = self.parents[1].get();
    Node* v = self.parents[2].get();
    q->ensure_grad();
    k->ensure_grad();
    v->ensure_grad();
    auto add_head = [hd, c](Tensor& t, int b, int l, int head, const MatRM& g) {
      for (int i = 0; i < l; ++i) {
        float* dst = t.data() + ((static_cast<std::int64_t>(b) * t.dim(1) + i) * c + head * hd);
        const float* src = g.data() + static_cast<std::int64_t>(i) * hd;
        for (int j = 0; j < hd; ++j) dst[j] += src[j];
      }
    };
    MatRM qh, kh, vh, go(lq, hd);
    for (int b = 0; b < b_n; ++b) {
      for (int head = 0; head < heads; ++head) {
        const MatRM& p = (*saved)[static_cast<std::size_t>(b) * heads + head];
        slice_head(q->value, b, lq, head, qh);
        slice_head(k->value, b, lk, head, kh);
        slice_head(v->value, b, lk, head, vh);
        for (int i = 0; i < lq; ++i) {
          std::memcpy(go.data() + static_cast<std::int64_t>(i) * hd,
                      self.grad.data() + ((static_cast<std::int64_t>(b) * lq + i) * c + head * hd),
                      sizeof(float) * static_cast<std::size_t>(hd));
        }
        MatRM dp = go * vh.transpose();
        MatRM dvh = p.transpose() * go;
        // Softmax backward per row.
        MatRM ds(lq, lk);
        for (int r = 0; r < lq; ++r) {
          float dot = 0.f;
          for (int i = 0; i < lk; ++i) dot += dp(r, i) * p(r, i);
          for (int i = 0; i < lk; ++i) ds(r, i) = p(r, i) * (dp(r, i) - dot);
        }
        MatRM dqh = (ds * kh) * scale;
        MatRM dkh = (ds.transpose() * qh) * scale;
        add_head(q->grad, b, lq, head, dqh);
        add_head(k->grad, b, lk, head, dkh);
        add_head(v->grad, b, lk, head, dvh);
      }
    }
  });
}

// --- convolution ------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  require(x->value.rank() == 4, "conv2d: x must be [B,H,W,C]");
  require(w->value.rank() == 4, "conv2d: w must be [KH,KW,Cin,Cout]");
  const int kh = w->value.dim(0), kw = w->value.dim(1);
  require(kh == kw, "conv2d: square kernels only");
  const int cin = w->value.dim(2), cout = w->value.dim(3);
  require(x->value.dim(3) == cin, "conv2d: channel mismatch, x " + x->value.shape_str() +
                                      " vs w " + w->value.shape_str());
  require(b->value.size() == cout, "conv2d: bias size mismatch");
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int b_n = x->value.dim(0), h = x->value.dim(1), wdt = x->value.dim(2);
  require((h + 2 * pad - kh) % stride == 0 && (wdt + 2 * pad - kw) % stride == 0,
          "conv2d: geometry does not tile" );
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wdt + 2 * pad - kw) / stride + 1;
  const std::int64_t rows = static_cast<std::int64_t>(b_n) * ho * wo;
  const int row_len = kh * kw * cin;

  float* col = grab(0, rows * row_len);
  im2col(x->value, kh, stride, pad, ho, wo, col);
  Tensor out({b_n, ho, wo, cout});
  {
    CMapM C(col, rows, row_len), W(w->value.data(), row_len, cout);
    MapM Y(out.data(), rows, cout);
    Y.noalias() = C * W;
    Y.rowwise() += CMapV(b->value.data(), cout).transpose();
  }

  return make_node(std::move(out), {x, w, b},
                   [kh, stride, pad, ho, wo, rows, row_len, cout](Node& self) {
    Node* x = self.parents[0].get();
    Node* w = self.parents[1].get();
    Node* b = self.parents[2].get();
    CMapM G(self.grad.data(), rows, cout);
    if (w->requires_grad || x->requires_grad) {
      // Recompute the column matrix; cheaper than holding it per node.
      float* col = grab(0, rows * row_len);
      im2col(x->value, kh, stride, pad, ho, wo, col);
      if (w->requires_grad) {
        w->ensure_grad();
        CMapM C(col, rows, row_len);
        MapM(w->grad.data(), row_len, cout).noalias() += C.transpose() * G;
      }
      if (x->requires_grad) {
        x->ensure_grad();
        float* dcol = grab(1, rows * row_len);
        CMapM W(w->value.data(), row_len, cout);
        MapM(dcol, rows, row_len).noalias() = G * W.transpose();
        col2im_add(dcol, kh, stride, pad, ho, wo, x->grad);
      }
    }
    if (b->requires_grad) {
      b->ensure_grad();
      MapV(b->grad.data(), cout) += G.colwise().sum().transpose();
    }
  });
}

Var depthwise_conv2d(const Var& x, const Var& w) {
  require(x->value.rank() == 4, "depthwise: x must be [B,H,W,C]");
  require(w->value.rank() == 3, "depthwise: w must be [K,K,C]");
  const int k = w->value.dim(0);
  require(w->value.dim(1) == k && k % 2 == 1, "depthwise: odd square kernels only");
  const int c = x->value.dim(3);
  require(w->value.dim(2) == c, "depthwise: channel mismatch");
  const int b_n = x->value.dim(0), h = x->value.dim(1), wdt = x->value.dim(2);
  const int pad = k / 2;

  Tensor out({b_n, h, wdt, c});
  for (int b = 0; b < b_n; ++b) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* wk = w->value.data() + (ky * k + kx) * c;
        const int dy = ky - pad, dx = kx - pad;
        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
        const int x0 = std::max(0, -dx), x1 = std::min(wdt, wdt - dx);
        for (int y = y0; y < y1; ++y) {
          const float* src = &x->value.at(b, y + dy, x0 + dx, 0);
          float* dst = &out.at(b, y, x0, 0);
          for (int p = 0; p < x1 - x0; ++p) {
            const float* s = src + static_cast<std::int64_t>(p) * c;
            float* o = dst + static_cast<std::int64_t>(p) * c;
            for (int j = 0; j < c; ++j) o[j] += s[j] * wk[j];
          }
        }
      }
    }
  }

  return make_node(std::move(out), {x, w}, [b_n, h, wdt, c, k, pad](Node& self) {
    Node* x = self.parents[0].get();
    Node* w = self.parents[1].get();
    if (x->requires_grad) x->ensure_grad();
    if (w->requires_grad) w->ensure_grad();
    for (int b = 0; b < b_n; ++b) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const float* wk = w->value.data() + (ky * k + kx) * c;
          float* dwk = w->requires_grad ? w->grad.data() + (ky * k + kx) * c : nullptr;
          const int dy = ky - pad, dx = kx - pad;
          const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(wdt, wdt - dx);
          for (int y = y0; y < y1; ++y) {
            const float* g = &self.grad.at(b, y, x0, 0);
            const float* src = &x->value.at(b, y + dy, x0 + dx, 0);
            const int count = x1 - x0;
            if (x->requires_grad) {
              float* dsrc = &x->grad.at(b, y + dy, x0 + dx, 0);
              for (int p = 0; p < count; ++p) {
                const float* gp = g + static_cast<std::int64_t>(p) * c;
                float* dp = dsrc + static_cast<std::int64_t>(p) * c;
                for (int j = 0; j < c; ++j) dp[j] += gp[j] * wk[j];
              }
            }
            if (dwk) {
              for (int p = 0; p < count; ++p) {
                const float* gp = g + static_cast<std::int64_t>(p) * c;
                const float* sp = src + static_cast<std::int64_t>(p) * c;
                for (int j = 0; j < c; ++j) dwk[j] += gp[j] * sp[j];
              }
            }
          }
        }
      }
    }
  });
}

// --- normalization / gating -------------------------------------------

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps) {
  const int c = x->value.shape().back();
  require(gamma->value.size() == c && beta->value.size() == c, "layer_norm: affine size mismatch");
  const std::int64_t rows = x->value.size() / c;
  Tensor out(x->value.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* src = x->value.data() + r * c;
    float* dst = out.data() + r * c;
    float mean = 0.f;
    for (int i = 0; i < c; ++i) mean += src[i];
    mean /= static_cast<float>(c);
    float var = 0.f;
    for (int i = 0; i < c; ++i) {
      const float d = src[i] - mean;
      var += d * d;
    }
    var /= static_cast<float>(c);
    const float inv = 1.f / std::sqrt(var + eps);
    for (int i = 0; i < c; ++i) {
      dst[i] = gamma->value[i] * ((src[i] - mean) * inv) + beta->value[i];
    }
  }
  return make_node(std::move(out), {x, gamma, beta}, [rows, c, eps](Node& self) {
    Node* x = self.parents[0].get();
    Node* gamma = self.parents[1].get();
    Node* beta = self.parents[2].get();
    if (x->requires_grad) x->ensure_grad();
    if (gamma->requires_grad) gamma->ensure_grad();
    if (beta->requires_grad) beta->ensure_grad();
    std::vector<float> xhat(static_cast<std::size_t>(c));
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* src = x->value.data() + r * c;
      const float* g = self.grad.data() + r * c;
      float mean = 0.f;
      for (int i = 0; i < c; ++i) mean += src[i];
      mean /= static_cast<float>(c);
      float var = 0.f;
      for (int i = 0; i < c; ++i) {
        const float d = src[i] - mean;
        var += d * d;
      }
      var /= static_cast<float>(c);
      const float inv = 1.f / std::sqrt(var + eps);
      for (int i = 0; i < c; ++i) xhat[static_cast<std::size_t>(i)] = (src[i] - mean) * inv;
      if (beta->requires_grad) {
        for (int i = 0; i < c; ++i) beta->grad[i] += g[i];
      }
      if (gamma->requires_grad) {
        for (int i = 0; i < c; ++i) gamma->grad[i] += g[i] * xhat[static_cast<std::size_t>(i)];
      }
      if (x->requires_grad) {
        float m1 = 0.f, m2 = 0.f;
        for (int i = 0; i < c; ++i) {
          const float gg = gamma->value[i] * g[i];
          m1 += gg;
          m2 += gg * xhat[static_cast<std::size_t>(i)];
        }
        m1 /= static_cast<float>(c);
        m2 /= static_cast<float>(c);
        float* d = x->grad.data() + r * c;
        for (int i = 0; i < c; ++i) {
          const float gg = gamma->value[i] * g[i];
          d[i] += inv * (gg - m1 - xhat[static_cast<std::size_t>(i)] * m2);
        }
      }
    }
  });
}

Var simple_gate(const Var& x) {
  const int c = x->value.shape().back();
  require(c % 2 == 0, "simple_gate: channel count must be even");
  const int half = c / 2;
  std::vector<int> out_shape = x->value.shape();
  out_shape.back() = half;
  const std::int64_t rows = x->value.size() / c;
  Tensor out(out_shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const float* src = x->value.data() + r * c;
    float* dst = out.data() + r * half;
    for (int i = 0; i < half; ++i) dst[i] = src[i] * src[half + i];
  }
  return make_node(std::move(out), {x}, [rows, c, half](Node& self) {
    Node* x = self.parents[0].get();
    x->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const float* src = x->value.data() + r * c;
      const float* g = self.grad.data() + r * half;
      float* d = x->grad.data() + r * c;
      for (int i = 0; i < half; ++i) {
        d[i] += g[i] * src[half + i];
        d[half + i] += g[i] * src[i];
      }
    }
  });
}

Var global_avg_pool(const Var& x) {
  require(x->value.rank() == 4, "global_avg_pool: expected [B,H,W,C]");
  const int b_n = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2), c = x->value.dim(3);
  const float inv = 1.f / static_cast<float>(h * w);
  Tensor out({b_n, c});
  for (int b = 0; b < b_n; ++b) {
    float* dst = out.data() + static_cast<std::int64_t>(b) * c;
    const float* src = x->value.data() + static_cast<std::int64_t>(b) * h * w * c;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
      for (int j = 0; j < c; ++j) dst[j] += src[i * c + j];
    }
    for (int j = 0; j < c; ++j) dst[j] *= inv;
  }
  return make_node(std::move(out), {x}, [b_n, h, w, c, inv](Node& self) {
    Node* x = self.parents[0].get();
    x->ensure_grad();
    for (int b = 0; b < b_n; ++b) {
      const float* g = self.grad.data() + static_cast<std::int64_t>(b) * c;
      float* d = x->grad.data() + static_cast<std::int64_t>(b) * h * w * c;
      for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
        for (int j = 0; j < c; ++j) d[i * c + j] += g[j] * inv;
      }
    }
  });
}

Var l2_normalize_rows(const Var& x) {
  require(x->value.rank() == 2, "l2_normalize_rows: expected [B,D]");
  const int b_n = x->value.dim(0), d = x->value.dim(1);
  Tensor out({b_n, d});
  std::vector<float> norms(static_cast<std::size_t>(b_n));
  for (int b = 0; b < b_n; ++b) {
    const float* src = x->value.data() + static_cast<std::int64_t>(b) * d;
    float s = 0.f;
    for (int i = 0; i < d; ++i) s += src[i] * src[i];
    const float norm = std::max(std::sqrt(s), 1e-12f);
    norms[static_cast<std::size_t>(b)] = norm;
    float* dst = out.data() + static_cast<std::int64_t>(b) * d;
    for (int i = 0; i < d; ++i) dst[i] = src[i] / norm;
  }
  return make_node(std::move(out), {x}, [b_n, d, norms](Node& self) {
    Node* x = self.parents[0].get();
    x->ensure_grad();
    for (int b = 0; b < b_n; ++b) {
      const float* y = self.value.data() + static_cast<std::int64_t>(b) * d;
      const float* g = self.grad.data() + static_cast<std::int64_t>(b) * d;
      float dot = 0.f;
      for (int i = 0; i < d; ++i) dot += y[i] * g[i];
      float* dst = x->grad.data() + static_cast<std::int64_t>(b) * d;
      const float inv = 1.f / norms[static_cast<std::size_t>(b)];
      for (int i = 0; i < d; ++i) dst[i] += (g[i] - y[i] * dot) * inv;
    }
  });
}

// --- reductions -------------------------------------------------------

Var mean_all(const Var& x) {
  const std::int64_t n = x->value.size();
  require(n > 0, "mean_all: empty tensor");
  double sum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) sum += x->value[i];
  Tensor out = Tensor::from({1}, {static_cast<float>(sum / static_cast<double>(n))});
  return make_node(std::move(out), {x}, [n](Node& self) {
    self.parents[0]->ensure_grad();
    const float g = self.grad[0] / static_cast<float>(n);
    float* d = self.parents[0]->grad.data();
    for (std::int64_t i = 0; i < n; ++i) d[i] += g;
  });
}

Var weighted_sum_all(const Var& x, const Tensor& weights) {
  require(x->value.same_shape(weights), "weighted_sum_all: shape mismatch");
  const std::int64_t n = x->value.size();
  double sum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) sum += static_cast<double>(x->value[i]) * weights[i];
  Tensor out = Tensor::from({1}, {static_cast<float>(sum)});
  Tensor w = weights;
  return make_node(std::move(out), {x}, [n, w](Node& self) {
    self.parents[0]->ensure_grad();
    const float g = self.grad[0];
    float* d = self.parents[0]->grad.data();
    for (std::int64_t i = 0; i < n; ++i) d[i] += g * w[i];
  });
}

Var weighted_scalar_sum(const std::vector<Var>& scalars, const std::vector<double>& coeffs) {
  require(scalars.size() == coeffs.size() && !scalars.empty(),
          "weighted_scalar_sum: length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    require(scalars[i]->value.size() == 1, "weighted_scalar_sum: inputs must be scalars");
    total += coeffs[i] * static_cast<double>(scalars[i]->value[0]);
  }
  Tensor out = Tensor::from({1}, {static_cast<float>(total)});
  std::vector<double> c = coeffs;
  return make_node(std::move(out), scalars, [c](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node* p = self.parents[i].get();
      if (!p->requires_grad) continue;
      p->ensure_grad();
      p->grad[0] += self.grad[0] * static_cast<float>(c[i]);
    }
  });
}

// --- fused losses -----------------------------------------------------

Var charbonnier_node(const Var& pred, const Tensor& target, float eps) {
  require(pred->value.same_shape(target), "charbonnier: shape mismatch " +
                                              pred->value.shape_str() + " vs " +
                                              shape_to_string(target.shape()));
  require_domain(eps > 0.f, "charbonnier: eps must be positive");
  const std::int64_t n = pred->value.size();
  double sum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred->value[i]) - target[i];
    sum += std::sqrt(d * d + static_cast<double>(eps) * eps);
  }
  Tensor out = Tensor::from({1}, {static_cast<float>(sum / static_cast<double>(n))});
  Tensor t = target;
  return make_node(std::move(out), {pred}, [n, t, eps](Node& self) {
    Node* pred = self.parents[0].get();
    pred->ensure_grad();
    const float g = self.grad[0] / static_cast<float>(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const float d = pred->value[i] - t[i];
      pred->grad[i] += g * d / std::sqrt(d * d + eps * eps);
    }
  });
}

Var l1_mean_node(const Var& pred, const Tensor& target) {
  require(pred->value.same_shape(target), "l1_mean: shape mismatch");
  const std::int64_t n = pred->value.size();
  double sum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    sum += std::abs(static_cast<double>(pred->value[i]) - target[i]);
  }
  Tensor out = Tensor::from({1}, {static_cast<float>(sum / static_cast<double>(n))});
  Tensor t = target;
  return make_node(std::move(out), {pred}, [n, t](Node& self) {
    Node* pred = self.parents[0].get();
    pred->ensure_grad();
    const float g = self.grad[0] / static_cast<float>(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const float d = pred->value[i] - t[i];
      pred->grad[i] += d > 0.f ? g : (d < 0.f ? -g : 0.f);
    }
  });
}

Var contrastive_node(const Var& anchor_emb, const Tensor& positive_emb,
                     const Tensor& negative_embs, float tau) {
  require_domain(tau > 0.f, "contrastive: temperature must be positive");
  require(anchor_emb->value.rank() == 2, "contrastive: anchors must be [B,D]");
  const int b_n = anchor_emb->value.dim(0), d = anchor_emb->value.dim(1);
  require(positive_emb.rank() == 2 && positive_emb.dim(0) == b_n && positive_emb.dim(1) == d,
          "contrastive: positives must match anchors");
  const int neg_n = negative_embs.empty() ? 0 : negative_embs.dim(0);
  if (neg_n > 0) {
    require(negative_embs.rank() == 2 && negative_embs.dim(1) == d,
            "contrastive: negative dim mismatch");
  }

  // Per anchor: softmax over [positive, negatives]; loss = -log p(positive).
  // Saved probabilities drive the backward pass.
  Tensor probs({b_n, neg_n + 1});
  double total = 0.0;
  for (int b = 0; b < b_n; ++b) {
    const float* a = anchor_emb->value.data() + static_cast<std::int64_t>(b) * d;
    std::vector<double> z(static_cast<std::size_t>(neg_n) + 1);
    const float* p = positive_emb.data() + static_cast<std::int64_t>(b) * d;
    double s = 0.0;
    for (int i = 0; i < d; ++i) s += static_cast<double>(a[i]) * p[i];
    z[0] = s / tau;
    for (int n = 0; n < neg_n; ++n) {
      const float* v = negative_embs.data() + static_cast<std::int64_t>(n) * d;
      double sn = 0.0;
      for (int i = 0; i < d; ++i) sn += static_cast<double>(a[i]) * v[i];
      z[static_cast<std::size_t>(n) + 1] = sn / tau;
    }
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double denom = 0.0;
    for (double v : z) denom += std::exp(v - mx);
    for (int i = 0; i <= neg_n; ++i) {
      probs[static_cast<std::int64_t>(b) * (neg_n + 1) + i] =
          static_cast<float>(std::exp(z[static_cast<std::size_t>(i)] - mx) / denom);
    }
    total += (std::log(denom) + mx) - z[0];  // logsumexp(z) - z0
  }
  Tensor out = Tensor::from({1}, {static_cast<float>(total / b_n)});
  Tensor pos = positive_emb;
  Tensor negs = negative_embs;
  return make_node(std::move(out), {anchor_emb}, [b_n, d, neg_n, tau, probs, pos, negs](Node& self) {
    Node* anchor = self.parents[0].get();
    anchor->ensure_grad();
    const float g = self.grad[0] / (static_cast<float>(b_n) * tau);
    for (int b = 0; b < b_n; ++b) {
      float* da = anchor->grad.data() + static_cast<std::int64_t>(b) * d;
      const float* prob = probs.data() + static_cast<std::int64_t>(b) * (neg_n + 1);
      const float* p = pos.data() + static_cast<std::int64_t>(b) * d;
      // d/da [lse(z) - z0] = sum_i prob_i * v_i / tau - v_0 / tau.
      const float w0 = prob[0] - 1.f;
      for (int i = 0; i < d; ++i) da[i] += g * w0 * p[i];
      for (int n = 0; n < neg_n; ++n) {
        const float* v = negs.data() + static_cast<std::int64_t>(n) * d;
        const float wn = prob[n + 1];
        for (int i = 0; i < d; ++i) da[i] += g * wn * v[i];
      }
    }
  });
}

}  // namespace demist
