#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numbers>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pointform/common.hpp"
#include "pointform/rng.hpp"

namespace pf {

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// One node of the reverse-mode tape. Leaves are constants or parameters;
// interior nodes keep their parents alive and know how to push gradient
// into them. Values are dense, contiguous, row-major.
template <class S>
class Tensor {
 public:
  std::vector<std::size_t> shape;
  std::vector<S> value;
  std::vector<S> grad;  // sized lazily, same length as value
  bool requires_grad = false;

  std::vector<std::shared_ptr<Tensor>> parents;
  std::function<void(Tensor&)> backward_fn;

  std::size_t size() const { return value.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const { return rank() ? shape[0] : 1; }
  std::size_t cols() const { return rank() ? size() / shape[0] : 1; }
  // last-axis length; every op that works "row-wise" means this axis
  std::size_t width() const { return rank() ? shape.back() : 1; }
  std::size_t height() const { return width() ? size() / width() : 0; }

  S scalar() const {
    check(size() == 1, cat("Tensor::scalar: size ", size(), " != 1"));
    return value[0];
  }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }

  Eigen::Map<MatRM<S>> mat() {
    return {value.data(), Eigen::Index(height()), Eigen::Index(width())};
  }
  Eigen::Map<const MatRM<S>> mat() const {
    return {value.data(), Eigen::Index(height()), Eigen::Index(width())};
  }
  Eigen::Map<MatRM<S>> gmat() {
    ensure_grad();
    return {grad.data(), Eigen::Index(height()), Eigen::Index(width())};
  }
};

template <class S>
using Var = std::shared_ptr<Tensor<S>>;

inline std::size_t numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// ---- leaf construction ----

template <class S>
Var<S> constant(std::vector<std::size_t> shape, std::vector<S> data) {
  check(numel(shape) == data.size(),
        cat("constant: shape ", shape_str(shape), " wants ", numel(shape),
            " values, got ", data.size()));
  auto t = std::make_shared<Tensor<S>>();
  t->shape = std::move(shape);
  t->value = std::move(data);
  return t;
}

template <class S>
Var<S> full(std::vector<std::size_t> shape, S fill) {
  auto t = std::make_shared<Tensor<S>>();
  t->value.assign(numel(shape), fill);
  t->shape = std::move(shape);
  return t;
}

template <class S>
Var<S> zeros(std::vector<std::size_t> shape) {
  return full<S>(std::move(shape), S(0));
}

template <class S>
Var<S> scalar_of(S v) {
  return constant<S>({1}, {v});
}

template <class S>
Var<S> param(std::vector<std::size_t> shape, Rng& rng, double stddev) {
  auto t = zeros<S>(std::move(shape));
  for (auto& v : t->value) v = S(stddev * rng.gaussian());
  t->requires_grad = true;
  return t;
}

template <class S>
Var<S> param_const(std::vector<std::size_t> shape, S fill) {
  auto t = full<S>(std::move(shape), fill);
  t->requires_grad = true;
  return t;
}

// fresh leaf carrying the same values; gradient stops here
template <class S>
Var<S> detach(const Var<S>& x) {
  auto t = std::make_shared<Tensor<S>>();
  t->shape = x->shape;
  t->value = x->value;
  return t;
}

namespace detail {

template <class S>
Var<S> node(std::vector<std::size_t> shape,
            std::initializer_list<Var<S>> parents) {
  auto t = std::make_shared<Tensor<S>>();
  t->value.assign(numel(shape), S(0));
  t->shape = std::move(shape);
  for (const auto& p : parents)
    if (p->requires_grad) t->requires_grad = true;
  if (t->requires_grad) t->parents.assign(parents);
  return t;
}

template <class S>
Var<S> node(std::vector<std::size_t> shape, const std::vector<Var<S>>& parents) {
  auto t = std::make_shared<Tensor<S>>();
  t->value.assign(numel(shape), S(0));
  t->shape = std::move(shape);
  for (const auto& p : parents)
    if (p->requires_grad) t->requires_grad = true;
  if (t->requires_grad) t->parents = parents;
  return t;
}

template <class S>
void set_backward(const Var<S>& t, std::function<void(Tensor<S>&)> fn) {
  if (t->requires_grad) t->backward_fn = std::move(fn);
}

inline bool same_shape(const std::vector<std::size_t>& a,
                       const std::vector<std::size_t>& b) {
  return a == b;
}

}  // namespace detail

// ---- backward pass ----

// Zeroes gradients across the subgraph, seeds d(root)/d(root) = 1 and
// runs the tape in reverse topological order. Deterministic: traversal
// follows stored parent order, accumulation is sequential.
template <class S>
void backward(const Var<S>& root) {
  check(root->size() == 1, "backward: root must be a scalar");
  check(root->requires_grad, "backward: root does not require grad");

  std::vector<Tensor<S>*> order;
  std::unordered_set<Tensor<S>*> seen;
  std::vector<std::pair<Tensor<S>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Tensor<S>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto* n : order) {
    n->ensure_grad();
    std::fill(n->grad.begin(), n->grad.end(), S(0));
  }
  root->grad[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---- elementwise and broadcast arithmetic ----

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  if (detail::same_shape(a->shape, b->shape)) {
    auto out = detail::node<S>(a->shape, {a, b});
    for (std::size_t i = 0; i < a->size(); ++i)
      out->value[i] = a->value[i] + b->value[i];
    detail::set_backward<S>(out, [pa = a.get(), pb = b.get()](Tensor<S>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i) pb->grad[i] += self.grad[i];
      }
    });
    return out;
  }
  if (b->size() == 1) {
    auto out = detail::node<S>(a->shape, {a, b});
    S c = b->value[0];
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] + c;
    detail::set_backward<S>(out, [pa = a.get(), pb = b.get()](Tensor<S>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i) pb->grad[0] += self.grad[i];
      }
    });
    return out;
  }
  // bias broadcast: b is rank-1 over the last axis
  if (b->rank() == 1 && b->shape[0] == a->width()) {
    auto out = detail::node<S>(a->shape, {a, b});
    std::size_t h = a->height(), w = a->width();
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        out->value[r * w + c] = a->value[r * w + c] + b->value[c];
    detail::set_backward<S>(out, [pa = a.get(), pb = b.get(), h, w](Tensor<S>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t r = 0; r < h; ++r)
          for (std::size_t c = 0; c < w; ++c) pb->grad[c] += self.grad[r * w + c];
      }
    });
    return out;
  }
  throw ValueError(cat("add: incompatible shapes ", shape_str(a->shape), " and ",
                       shape_str(b->shape)));
}

template <class S>
Var<S> scale(const Var<S>& a, double c) {
  auto out = detail::node<S>(a->shape, {a});
  for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = S(c) * a->value[i];
  detail::set_backward<S>(out, [pa = a.get(), c](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < self.size(); ++i)
      pa->grad[i] += S(c) * self.grad[i];
  });
  return out;
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  return add(a, scale(b, -1.0));
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  if (detail::same_shape(a->shape, b->shape)) {
    auto out = detail::node<S>(a->shape, {a, b});
    for (std::size_t i = 0; i < a->size(); ++i)
      out->value[i] = a->value[i] * b->value[i];
    detail::set_backward<S>(out, [pa = a.get(), pb = b.get()](Tensor<S>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i)
          pa->grad[i] += self.grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i)
          pb->grad[i] += self.grad[i] * pa->value[i];
      }
    });
    return out;
  }
  if (b->size() == 1) {
    auto out = detail::node<S>(a->shape, {a, b});
    S c = b->value[0];
    for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] * c;
    detail::set_backward<S>(out, [pa = a.get(), pb = b.get(), c](Tensor<S>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i)
          pa->grad[i] += self.grad[i] * c;
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.size(); ++i)
          pb->grad[0] += self.grad[i] * pa->value[i];
      }
    });
    return out;
  }
  throw ValueError(cat("mul: incompatible shapes ", shape_str(a->shape), " and ",
                       shape_str(b->shape)));
}

// ---- linear algebra ----

// (m,k)x(k,n) or batched-left (b,m,k)x(k,n); the batch axis flattens away
template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  check(b->rank() == 2, cat("matmul: rhs must be rank 2, got ",
                            shape_str(b->shape)));
  check(a->rank() == 2 || a->rank() == 3,
        cat("matmul: lhs must be rank 2 or 3, got ", shape_str(a->shape)));
  check(a->width() == b->shape[0],
        cat("matmul: inner dims differ, ", shape_str(a->shape), " x ",
            shape_str(b->shape)));
  std::vector<std::size_t> oshape = a->shape;
  oshape.back() = b->shape[1];
  auto out = detail::node<S>(oshape, {a, b});
  out->mat().noalias() = a->mat() * b->mat();
  detail::set_backward<S>(out, [pa = a.get(), pb = b.get()](Tensor<S>& self) {
    if (pa->requires_grad)
      pa->gmat().noalias() += self.gmat() * pb->mat().transpose();
    if (pb->requires_grad)
      pb->gmat().noalias() += pa->mat().transpose() * self.gmat();
  });
  return out;
}

// batched (B,m,k)x(B,k,n); transpose_b treats b as (B,n,k)
template <class S>
Var<S> bmm(const Var<S>& a, const Var<S>& b, bool transpose_b = false) {
  check(a->rank() == 3 && b->rank() == 3,
        cat("bmm: wants rank-3 inputs, got ", shape_str(a->shape), " and ",
            shape_str(b->shape)));
  check(a->shape[0] == b->shape[0],
        cat("bmm: batch dims differ, ", shape_str(a->shape), " x ",
            shape_str(b->shape)));
  std::size_t B = a->shape[0], m = a->shape[1], k = a->shape[2];
  std::size_t bk = transpose_b ? b->shape[2] : b->shape[1];
  std::size_t n = transpose_b ? b->shape[1] : b->shape[2];
  check(k == bk, cat("bmm: inner dims differ, ", shape_str(a->shape), " x ",
                     shape_str(b->shape), transpose_b ? " (rhs transposed)" : ""));
  auto out = detail::node<S>({B, m, n}, {a, b});
  auto slab = [](Tensor<S>& t, std::size_t i, std::size_t r, std::size_t c) {
    return Eigen::Map<MatRM<S>>(t.value.data() + i * r * c, r, c);
  };
  for (std::size_t i = 0; i < B; ++i) {
    Eigen::Map<const MatRM<S>> ai(a->value.data() + i * m * k, m, k);
    Eigen::Map<const MatRM<S>> bi(b->value.data() + i * b->shape[1] * b->shape[2],
                                  b->shape[1], b->shape[2]);
    if (transpose_b)
      slab(*out, i, m, n).noalias() = ai * bi.transpose();
    else
      slab(*out, i, m, n).noalias() = ai * bi;
  }
  detail::set_backward<S>(out, [pa = a.get(), pb = b.get(), B, m, k, n,
                                transpose_b](Tensor<S>& self) {
    if (pa->requires_grad) pa->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    for (std::size_t i = 0; i < B; ++i) {
      Eigen::Map<const MatRM<S>> gi(self.grad.data() + i * m * n, m, n);
      Eigen::Map<const MatRM<S>> ai(pa->value.data() + i * m * k, m, k);
      Eigen::Map<const MatRM<S>> bi(
          pb->value.data() + i * pb->shape[1] * pb->shape[2], pb->shape[1],
          pb->shape[2]);
      if (pa->requires_grad) {
        Eigen::Map<MatRM<S>> ga(pa->grad.data() + i * m * k, m, k);
        ga.noalias() += transpose_b ? (gi * bi).eval() : (gi * bi.transpose()).eval();
      }
      if (pb->requires_grad) {
        Eigen::Map<MatRM<S>> gb(pb->grad.data() + i * pb->shape[1] * pb->shape[2],
                                pb->shape[1], pb->shape[2]);
        gb.noalias() += transpose_b ? (gi.transpose() * ai).eval()
                                    : (ai.transpose() * gi).eval();
      }
    }
  });
  return out;
}

template <class S>
Var<S> transpose(const Var<S>& a) {
  check(a->rank() == 2, cat("transpose: wants rank 2, got ", shape_str(a->shape)));
  auto out = detail::node<S>({a->shape[1], a->shape[0]}, {a});
  out->mat().noalias() = a->mat().transpose();
  detail::set_backward<S>(out, [pa = a.get()](Tensor<S>& self) {
    pa->gmat().noalias() += self.gmat().transpose();
  });
  return out;
}

// ---- shape plumbing ----

template <class S>
Var<S> reshape(const Var<S>& a, std::vector<std::size_t> shape) {
  check(numel(shape) == a->size(), cat("reshape: ", shape_str(a->shape),
                                       " cannot view as ", shape_str(shape)));
  auto out = detail::node<S>(shape, {a});
  out->value = a->value;
  detail::set_backward<S>(out, [pa = a.get()](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i];
  });
  return out;
}

template <class S>
Var<S> slice_rows(const Var<S>& a, std::size_t begin, std::size_t end) {
  check(a->rank() == 2, cat("slice_rows: wants rank 2, got ", shape_str(a->shape)));
  check(begin <= end && end <= a->shape[0],
        cat("slice_rows: range [", begin, ",", end, ") out of ", a->shape[0]));
  std::size_t w = a->width();
  auto out = detail::node<S>({end - begin, w}, {a});
  std::copy(a->value.begin() + begin * w, a->value.begin() + end * w,
            out->value.begin());
  detail::set_backward<S>(out, [pa = a.get(), begin, w](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < self.size(); ++i)
      pa->grad[begin * w + i] += self.grad[i];
  });
  return out;
}

template <class S>
Var<S> slice_cols(const Var<S>& a, std::size_t begin, std::size_t end) {
  check(a->rank() == 2, cat("slice_cols: wants rank 2, got ", shape_str(a->shape)));
  check(begin <= end && end <= a->shape[1],
        cat("slice_cols: range [", begin, ",", end, ") out of ", a->shape[1]));
  std::size_t h = a->shape[0], w = a->shape[1], ow = end - begin;
  auto out = detail::node<S>({h, ow}, {a});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < ow; ++c)
      out->value[r * ow + c] = a->value[r * w + begin + c];
  detail::set_backward<S>(out, [pa = a.get(), begin, h, w, ow](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < ow; ++c)
        pa->grad[r * w + begin + c] += self.grad[r * ow + c];
  });
  return out;
}

template <class S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  check(!parts.empty(), "concat_rows: no inputs");
  std::size_t w = parts[0]->width(), h = 0;
  for (const auto& p : parts) {
    check(p->rank() == 2, cat("concat_rows: wants rank 2, got ",
                              shape_str(p->shape)));
    check(p->width() == w, cat("concat_rows: column mismatch, ", w, " vs ",
                               p->width()));
    h += p->shape[0];
  }
  auto out = detail::node<S>({h, w}, parts);
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::copy(p->value.begin(), p->value.end(), out->value.begin() + at);
    at += p->size();
  }
  std::vector<Tensor<S>*> raw;
  for (const auto& p : parts) raw.push_back(p.get());
  detail::set_backward<S>(out, [raw](Tensor<S>& self) {
    std::size_t at = 0;
    for (auto* p : raw) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < p->size(); ++i) p->grad[i] += self.grad[at + i];
      }
      at += p->size();
    }
  });
  return out;
}

template <class S>
Var<S> concat_cols(const Var<S>& a, const Var<S>& b) {
  check(a->rank() == 2 && b->rank() == 2 && a->shape[0] == b->shape[0],
        cat("concat_cols: incompatible ", shape_str(a->shape), " and ",
            shape_str(b->shape)));
  std::size_t h = a->shape[0], wa = a->shape[1], wb = b->shape[1];
  auto out = detail::node<S>({h, wa + wb}, {a, b});
  for (std::size_t r = 0; r < h; ++r) {
    std::copy(a->value.begin() + r * wa, a->value.begin() + (r + 1) * wa,
              out->value.begin() + r * (wa + wb));
    std::copy(b->value.begin() + r * wb, b->value.begin() + (r + 1) * wb,
              out->value.begin() + r * (wa + wb) + wa);
  }
  detail::set_backward<S>(out, [pa = a.get(), pb = b.get(), h, wa, wb](Tensor<S>& self) {
    for (std::size_t r = 0; r < h; ++r) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t c = 0; c < wa; ++c)
          pa->grad[r * wa + c] += self.grad[r * (wa + wb) + c];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t c = 0; c < wb; ++c)
          pb->grad[r * wb + c] += self.grad[r * (wa + wb) + wa + c];
      }
    }
  });
  return out;
}

// ---- indexed row movement ----

template <class S>
Var<S> gather_rows(const Var<S>& a, std::vector<std::size_t> idx) {
  check(a->rank() == 2, cat("gather_rows: wants rank 2, got ",
                            shape_str(a->shape)));
  for (auto i : idx)
    check(i < a->shape[0], cat("gather_rows: index ", i, " out of ", a->shape[0]));
  std::size_t w = a->width();
  auto out = detail::node<S>({idx.size(), w}, {a});
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy(a->value.begin() + idx[r] * w, a->value.begin() + (idx[r] + 1) * w,
              out->value.begin() + r * w);
  detail::set_backward<S>(out, [pa = a.get(), idx = std::move(idx), w](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < w; ++c)
        pa->grad[idx[r] * w + c] += self.grad[r * w + c];
  });
  return out;
}

// out[j] = sum of rows r with idx[r] == j
template <class S>
Var<S> scatter_add_rows(const Var<S>& a, std::vector<std::size_t> idx,
                        std::size_t out_rows) {
  check(a->rank() == 2, cat("scatter_add_rows: wants rank 2, got ",
                            shape_str(a->shape)));
  check(idx.size() == a->shape[0],
        cat("scatter_add_rows: ", idx.size(), " indices for ", a->shape[0],
            " rows"));
  for (auto i : idx)
    check(i < out_rows, cat("scatter_add_rows: index ", i, " out of ", out_rows));
  std::size_t w = a->width();
  auto out = detail::node<S>({out_rows, w}, {a});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t c = 0; c < w; ++c)
      out->value[idx[r] * w + c] += a->value[r * w + c];
  detail::set_backward<S>(out, [pa = a.get(), idx = std::move(idx), w](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < w; ++c)
        pa->grad[r * w + c] += self.grad[idx[r] * w + c];
  });
  return out;
}

template <class S>
Var<S> broadcast_row(const Var<S>& a, std::size_t n) {
  check(a->rank() == 1 || (a->rank() == 2 && a->shape[0] == 1),
        cat("broadcast_row: wants a single row, got ", shape_str(a->shape)));
  std::size_t w = a->size();
  auto out = detail::node<S>({n, w}, {a});
  for (std::size_t r = 0; r < n; ++r)
    std::copy(a->value.begin(), a->value.end(), out->value.begin() + r * w);
  detail::set_backward<S>(out, [pa = a.get(), n, w](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < w; ++c) pa->grad[c] += self.grad[r * w + c];
  });
  return out;
}

// each row multiplied by a fixed factor; factors are data, not graph input
template <class S>
Var<S> row_scale(const Var<S>& a, std::vector<S> factors) {
  check(a->rank() == 2, cat("row_scale: wants rank 2, got ", shape_str(a->shape)));
  check(factors.size() == a->shape[0],
        cat("row_scale: ", factors.size(), " factors for ", a->shape[0], " rows"));
  std::size_t h = a->shape[0], w = a->shape[1];
  auto out = detail::node<S>(a->shape, {a});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      out->value[r * w + c] = a->value[r * w + c] * factors[r];
  detail::set_backward<S>(out, [pa = a.get(), factors = std::move(factors), h,
                                w](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        pa->grad[r * w + c] += self.grad[r * w + c] * factors[r];
  });
  return out;
}

// ---- nonlinearities ----

template <class S>
Var<S> gelu(const Var<S>& a) {
  auto out = detail::node<S>(a->shape, {a});
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < a->size(); ++i) {
    double x = double(a->value[i]);
    out->value[i] = S(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  detail::set_backward<S>(out, [pa = a.get()](Tensor<S>& self) {
    pa->ensure_grad();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (std::size_t i = 0; i < self.size(); ++i) {
      double x = double(pa->value[i]);
      double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      pa->grad[i] += self.grad[i] * S(cdf + x * pdf);
    }
  });
  return out;
}

template <class S>
Var<S> tanh_t(const Var<S>& a) {
  auto out = detail::node<S>(a->shape, {a});
  for (std::size_t i = 0; i < a->size(); ++i)
    out->value[i] = S(std::tanh(double(a->value[i])));
  detail::set_backward<S>(out, [pa = a.get()](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < self.size(); ++i) {
      S y = self.value[i];
      pa->grad[i] += self.grad[i] * (S(1) - y * y);
    }
  });
  return out;
}

// how an additive attention mask spreads over a rank-3 score block
enum class MaskLayout {
  SharedQK,   // mask (T,K), same for every batch slab
  PerBatchK,  // mask (B,K), same for every query row
};

// softmax over the last axis of a rank-2 or rank-3 tensor; optional
// additive mask applied before normalization (not a graph input)
template <class S>
Var<S> softmax(const Var<S>& a, const MatRM<S>* mask = nullptr,
               MaskLayout layout = MaskLayout::SharedQK) {
  check(a->rank() == 2 || a->rank() == 3,
        cat("softmax: wants rank 2 or 3, got ", shape_str(a->shape)));
  std::size_t h = a->height(), w = a->width();
  if (mask) {
    if (layout == MaskLayout::SharedQK)
      check(std::size_t(mask->rows()) == (a->rank() == 3 ? a->shape[1] : h) &&
                std::size_t(mask->cols()) == w,
            "softmax: mask extents do not match scores");
    else
      check(a->rank() == 3 && std::size_t(mask->rows()) == a->shape[0] &&
                std::size_t(mask->cols()) == w,
            "softmax: per-batch mask extents do not match scores");
  }
  auto out = detail::node<S>(a->shape, {a});
  std::size_t rows_per_batch = a->rank() == 3 ? a->shape[1] : h;
  for (std::size_t r = 0; r < h; ++r) {
    const S* in = a->value.data() + r * w;
    S* o = out->value.data() + r * w;
    S hi = -std::numeric_limits<S>::infinity();
    auto masked = [&](std::size_t c) {
      S m = S(0);
      if (mask)
        m = layout == MaskLayout::SharedQK ? (*mask)(r % rows_per_batch, c)
                                           : (*mask)(r / rows_per_batch, c);
      return in[c] + m;
    };
    for (std::size_t c = 0; c < w; ++c) hi = std::max(hi, masked(c));
    S sum = S(0);
    for (std::size_t c = 0; c < w; ++c) {
      o[c] = std::exp(masked(c) - hi);
      sum += o[c];
    }
    for (std::size_t c = 0; c < w; ++c) o[c] /= sum;
  }
  detail::set_backward<S>(out, [pa = a.get(), h, w](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t r = 0; r < h; ++r) {
      const S* y = self.value.data() + r * w;
      const S* gy = self.grad.data() + r * w;
      S dot = S(0);
      for (std::size_t c = 0; c < w; ++c) dot += y[c] * gy[c];
      for (std::size_t c = 0; c < w; ++c)
        pa->grad[r * w + c] += y[c] * (gy[c] - dot);
    }
  });
  return out;
}

template <class S>
Var<S> layernorm(const Var<S>& a, const Var<S>& gain, const Var<S>& bias,
                 double eps = 1e-5) {
  std::size_t w = a->width(), h = a->height();
  check(gain->rank() == 1 && gain->shape[0] == w && bias->rank() == 1 &&
            bias->shape[0] == w,
        cat("layernorm: gain/bias must be rank-1 of ", w));
  auto out = detail::node<S>(a->shape, {a, gain, bias});
  std::vector<S> inv_sd(h), xhat(a->size());
  for (std::size_t r = 0; r < h; ++r) {
    const S* in = a->value.data() + r * w;
    S mu = S(0);
    for (std::size_t c = 0; c < w; ++c) mu += in[c];
    mu /= S(w);
    S var = S(0);
    for (std::size_t c = 0; c < w; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= S(w);
    S is = S(1) / std::sqrt(var + S(eps));
    inv_sd[r] = is;
    for (std::size_t c = 0; c < w; ++c) {
      xhat[r * w + c] = (in[c] - mu) * is;
      out->value[r * w + c] = gain->value[c] * xhat[r * w + c] + bias->value[c];
    }
  }
  detail::set_backward<S>(out, [pa = a.get(), pg = gain.get(), pb = bias.get(),
                                inv_sd = std::move(inv_sd),
                                xhat = std::move(xhat), h, w](Tensor<S>& self) {
    for (std::size_t r = 0; r < h; ++r) {
      const S* gy = self.grad.data() + r * w;
      const S* xh = xhat.data() + r * w;
      if (pg->requires_grad) {
        pg->ensure_grad();
        for (std::size_t c = 0; c < w; ++c) pg->grad[c] += gy[c] * xh[c];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t c = 0; c < w; ++c) pb->grad[c] += gy[c];
      }
      if (pa->requires_grad) {
        pa->ensure_grad();
        S sum_g = S(0), sum_gx = S(0);
        for (std::size_t c = 0; c < w; ++c) {
          S g = gy[c] * pg->value[c];
          sum_g += g;
          sum_gx += g * xh[c];
        }
        for (std::size_t c = 0; c < w; ++c) {
          S g = gy[c] * pg->value[c];
          pa->grad[r * w + c] +=
              inv_sd[r] * (g - sum_g / S(w) - xh[c] * sum_gx / S(w));
        }
      }
    }
  });
  return out;
}

// ---- reductions ----

template <class S>
Var<S> reduce_sum(const Var<S>& a) {
  auto out = detail::node<S>({std::size_t(1)}, {a});
  S s = S(0);
  for (S v : a->value) s += v;
  out->value[0] = s;
  detail::set_backward<S>(out, [pa = a.get()](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t i = 0; i < pa->size(); ++i) pa->grad[i] += self.grad[0];
  });
  return out;
}

template <class S>
Var<S> reduce_mean(const Var<S>& a) {
  check(a->size() > 0, "reduce_mean: empty input");
  return scale(reduce_sum(a), 1.0 / double(a->size()));
}

// mean over rows of a rank-2 tensor, keeping a single row
template <class S>
Var<S> mean_over_rows(const Var<S>& a) {
  check(a->rank() == 2 && a->shape[0] > 0,
        cat("mean_over_rows: wants non-empty rank 2, got ", shape_str(a->shape)));
  std::size_t h = a->shape[0], w = a->shape[1];
  auto out = detail::node<S>({std::size_t(1), w}, {a});
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) out->value[c] += a->value[r * w + c];
  for (std::size_t c = 0; c < w; ++c) out->value[c] /= S(h);
  detail::set_backward<S>(out, [pa = a.get(), h, w](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        pa->grad[r * w + c] += self.grad[c] / S(h);
  });
  return out;
}

// max over the middle axis of (B,K,C); invalid slots are skipped.
// Ties route gradient to the smallest slot index.
template <class S>
Var<S> reduce_max_mid(const Var<S>& a,
                      const std::vector<unsigned char>* valid = nullptr) {
  check(a->rank() == 3, cat("reduce_max_mid: wants rank 3, got ",
                            shape_str(a->shape)));
  std::size_t B = a->shape[0], K = a->shape[1], C = a->shape[2];
  if (valid)
    check(valid->size() == B * K, "reduce_max_mid: validity mask size mismatch");
  auto out = detail::node<S>({B, C}, {a});
  std::vector<std::size_t> arg(B * C);
  for (std::size_t b = 0; b < B; ++b) {
    bool any = false;
    for (std::size_t k = 0; k < K; ++k) {
      if (valid && !(*valid)[b * K + k]) continue;
      const S* in = a->value.data() + (b * K + k) * C;
      if (!any) {
        for (std::size_t c = 0; c < C; ++c) {
          out->value[b * C + c] = in[c];
          arg[b * C + c] = k;
        }
        any = true;
      } else {
        for (std::size_t c = 0; c < C; ++c)
          if (in[c] > out->value[b * C + c]) {
            out->value[b * C + c] = in[c];
            arg[b * C + c] = k;
          }
      }
    }
    check(any, cat("reduce_max_mid: group ", b, " has no valid slots"));
  }
  detail::set_backward<S>(out, [pa = a.get(), arg = std::move(arg), K, C](Tensor<S>& self) {
    pa->ensure_grad();
    std::size_t B = self.shape[0];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        pa->grad[(b * K + arg[b * C + c]) * C + c] += self.grad[b * C + c];
  });
  return out;
}

// mean over the middle axis of (B,K,C) counting only valid slots
template <class S>
Var<S> masked_mean_mid(const Var<S>& a, const std::vector<unsigned char>& valid) {
  check(a->rank() == 3, cat("masked_mean_mid: wants rank 3, got ",
                            shape_str(a->shape)));
  std::size_t B = a->shape[0], K = a->shape[1], C = a->shape[2];
  check(valid.size() == B * K, "masked_mean_mid: validity mask size mismatch");
  auto out = detail::node<S>({B, C}, {a});
  std::vector<S> inv_count(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t n = 0;
    for (std::size_t k = 0; k < K; ++k) {
      if (!valid[b * K + k]) continue;
      ++n;
      const S* in = a->value.data() + (b * K + k) * C;
      for (std::size_t c = 0; c < C; ++c) out->value[b * C + c] += in[c];
    }
    check(n > 0, cat("masked_mean_mid: group ", b, " has no valid slots"));
    inv_count[b] = S(1) / S(n);
    for (std::size_t c = 0; c < C; ++c) out->value[b * C + c] *= inv_count[b];
  }
  detail::set_backward<S>(out, [pa = a.get(), valid, inv_count = std::move(inv_count),
                                K, C](Tensor<S>& self) {
    pa->ensure_grad();
    std::size_t B = self.shape[0];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < K; ++k) {
        if (!valid[b * K + k]) continue;
        for (std::size_t c = 0; c < C; ++c)
          pa->grad[(b * K + k) * C + c] += self.grad[b * C + c] * inv_count[b];
      }
  });
  return out;
}

// ---- attention head plumbing ----

// (T, H*hd) -> (H, T, hd)
template <class S>
Var<S> split_heads(const Var<S>& a, std::size_t heads) {
  check(a->rank() == 2, cat("split_heads: wants rank 2, got ",
                            shape_str(a->shape)));
  check(a->shape[1] % heads == 0,
        cat("split_heads: width ", a->shape[1], " not divisible by ", heads));
  std::size_t T = a->shape[0], hd = a->shape[1] / heads;
  auto out = detail::node<S>({heads, T, hd}, {a});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < hd; ++c)
        out->value[(h * T + t) * hd + c] = a->value[t * heads * hd + h * hd + c];
  detail::set_backward<S>(out, [pa = a.get(), heads, T, hd](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < hd; ++c)
          pa->grad[t * heads * hd + h * hd + c] +=
              self.grad[(h * T + t) * hd + c];
  });
  return out;
}

// (H, T, hd) -> (T, H*hd)
template <class S>
Var<S> merge_heads(const Var<S>& a) {
  check(a->rank() == 3, cat("merge_heads: wants rank 3, got ",
                            shape_str(a->shape)));
  std::size_t heads = a->shape[0], T = a->shape[1], hd = a->shape[2];
  auto out = detail::node<S>({T, heads * hd}, {a});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < hd; ++c)
        out->value[t * heads * hd + h * hd + c] = a->value[(h * T + t) * hd + c];
  detail::set_backward<S>(out, [pa = a.get(), heads, T, hd](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < hd; ++c)
          pa->grad[(h * T + t) * hd + c] +=
              self.grad[t * heads * hd + h * hd + c];
  });
  return out;
}

// ---- fused losses ----

// mean over selected rows of -log softmax(logits)[target]; rows with
// mask 0 contribute nothing and receive exactly zero gradient
template <class S>
Var<S> cross_entropy(const Var<S>& logits, const std::vector<int>& targets,
                     const std::vector<unsigned char>& mask) {
  check(logits->rank() == 2, cat("cross_entropy: wants rank-2 logits, got ",
                                 shape_str(logits->shape)));
  std::size_t R = logits->shape[0], V = logits->shape[1];
  check(targets.size() == R && mask.size() == R,
        cat("cross_entropy: ", R, " rows vs ", targets.size(), " targets, ",
            mask.size(), " mask entries"));
  std::size_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  check(n > 0, "cross_entropy: mask selects no rows");
  for (std::size_t r = 0; r < R; ++r)
    if (mask[r])
      check(targets[r] >= 0 && std::size_t(targets[r]) < V,
            cat("cross_entropy: target ", targets[r], " out of vocab ", V));
  auto out = detail::node<S>({std::size_t(1)}, {logits});
  std::vector<S> probs(logits->size());
  double total = 0;
  for (std::size_t r = 0; r < R; ++r) {
    const S* in = logits->value.data() + r * V;
    S* p = probs.data() + r * V;
    S hi = in[0];
    for (std::size_t c = 1; c < V; ++c) hi = std::max(hi, in[c]);
    S sum = S(0);
    for (std::size_t c = 0; c < V; ++c) {
      p[c] = std::exp(in[c] - hi);
      sum += p[c];
    }
    for (std::size_t c = 0; c < V; ++c) p[c] /= sum;
    if (mask[r]) total += -std::log(double(p[targets[r]]));
  }
  out->value[0] = S(total / double(n));
  detail::set_backward<S>(out, [pl = logits.get(), targets, mask,
                                probs = std::move(probs), n, V](Tensor<S>& self) {
    pl->ensure_grad();
    S g = self.grad[0] / S(n);
    std::size_t R = pl->shape[0];
    for (std::size_t r = 0; r < R; ++r) {
      if (!mask[r]) continue;
      const S* p = probs.data() + r * V;
      for (std::size_t c = 0; c < V; ++c)
        pl->grad[r * V + c] += g * (p[c] - (std::size_t(targets[r]) == std::size_t(c) ? S(1) : S(0)));
    }
  });
  return out;
}

template <class S>
Var<S> l2_normalize_rows(const Var<S>& a, double eps = 1e-12) {
  check(a->rank() == 2, cat("l2_normalize_rows: wants rank 2, got ",
                            shape_str(a->shape)));
  std::size_t h = a->shape[0], w = a->shape[1];
  auto out = detail::node<S>(a->shape, {a});
  std::vector<S> inv_norm(h);
  for (std::size_t r = 0; r < h; ++r) {
    const S* in = a->value.data() + r * w;
    S sq = S(0);
    for (std::size_t c = 0; c < w; ++c) sq += in[c] * in[c];
    inv_norm[r] = S(1) / std::sqrt(sq + S(eps));
    for (std::size_t c = 0; c < w; ++c) out->value[r * w + c] = in[c] * inv_norm[r];
  }
  detail::set_backward<S>(out, [pa = a.get(), inv_norm = std::move(inv_norm), h,
                                w](Tensor<S>& self) {
    pa->ensure_grad();
    for (std::size_t r = 0; r < h; ++r) {
      const S* y = self.value.data() + r * w;
      const S* gy = self.grad.data() + r * w;
      S dot = S(0);
      for (std::size_t c = 0; c < w; ++c) dot += y[c] * gy[c];
      for (std::size_t c = 0; c < w; ++c)
        pa->grad[r * w + c] += inv_norm[r] * (gy[c] - y[c] * dot);
    }
  });
  return out;
}

// ---- finite-difference verification ----

// max over coordinates of |analytic - numeric| / max(1, |analytic|)
// using central differences f(x+eps) - f(x-eps)
template <class S>
double grad_check(const std::function<Var<S>(const Var<S>&)>& f, const Var<S>& x,
                  double eps = 1e-5) {
  check(eps > 0, "grad_check: eps must be positive");
  bool had = x->requires_grad;
  x->requires_grad = true;
  auto loss = f(x);
  check(loss->size() == 1, "grad_check: f must produce a scalar");
  backward(loss);
  std::vector<S> analytic = x->grad;
  double worst = 0;
  for (std::size_t i = 0; i < x->size(); ++i) {
    S keep = x->value[i];
    x->value[i] = keep + S(eps);
    double up = double(f(x)->scalar());
    x->value[i] = keep - S(eps);
    double dn = double(f(x)->scalar());
    x->value[i] = keep;
    double numeric = (up - dn) / (2 * eps);
    double a = double(analytic[i]);
    if (!std::isfinite(numeric) || !std::isfinite(a))
      throw ValueError(cat("grad_check: non-finite derivative at ", i));
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  x->requires_grad = had;
  return worst;
}

}  // namespace pf
