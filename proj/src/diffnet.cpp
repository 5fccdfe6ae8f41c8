#include "sim2rec/diffnet.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <memory>
#include <sstream>

#include "sim2rec/errors.hpp"

namespace sim2rec::nn {

// ---- ParamStore -------------------------------------------------------------

std::size_t ParamStore::add(const std::string& name, Matrix init) {
  if (index_.count(name) != 0) {
    throw ConfigError("duplicate parameter name: " + name);
  }
  Param p;
  p.name = name;
  p.grad = Matrix::Zero(init.rows(), init.cols());
  p.m = Matrix::Zero(init.rows(), init.cols());
  p.v = Matrix::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  params_.push_back(std::move(p));
  index_.emplace(name, params_.size() - 1);
  return params_.size() - 1;
}

Param& ParamStore::at(std::string_view name) { return params_[index_of(name)]; }

const Param& ParamStore::at(std::string_view name) const {
  return params_[index_of(name)];
}

bool ParamStore::contains(std::string_view name) const {
  return index_.find(name) != index_.end();
}

std::size_t ParamStore::index_of(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ConfigError("unknown parameter: " + std::string(name));
  }
  return it->second;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

double ParamStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) s += p.grad.squaredNorm();
  return std::sqrt(s);
}

bool ParamStore::grads_finite() const {
  for (const auto& p : params_) {
    if (!p.grad.allFinite()) return false;
  }
  return true;
}

// ---- Graph ------------------------------------------------------------------

const Matrix& Var::value() const {
  if (!valid()) throw UsageError("use of an empty Var");
  return graph->value(id);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ConfigError("Var::scalar on a non-1x1 value");
  return v(0, 0);
}

Var Graph::constant(Matrix value) { return push(std::move(value), {}, nullptr); }

Var Graph::constant_scalar(double value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return constant(std::move(m));
}

Var Graph::param(ParamStore& store, std::size_t index) {
  Param& p = store.at(index);
  Node n;
  n.value = p.value;
  n.param = &p;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::push(Matrix value, std::initializer_list<Var> parents, BackwardFn back) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.graph != this) throw UsageError("operands belong to different graphs");
    n.needs_grad = n.needs_grad || nodes_[p.id].needs_grad;
  }
  if (n.needs_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::push(Matrix value, const std::vector<Var>& parents, BackwardFn back) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.graph != this) throw UsageError("operands belong to different graphs");
    n.needs_grad = n.needs_grad || nodes_[p.id].needs_grad;
  }
  if (n.needs_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Matrix& Graph::grad_slot(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Graph::backward(const Var& loss) {
  if (!loss.valid() || loss.graph != this || nodes_.empty()) {
    throw UsageError("backward() called without a recorded forward pass");
  }
  if (consumed_) throw UsageError("backward() called twice on the same graph");
  if (nodes_[loss.id].value.size() != 1) {
    throw ConfigError("backward() needs a scalar loss");
  }
  consumed_ = true;
  if (!nodes_[loss.id].needs_grad) return;
  grad_slot(loss.id)(0, 0) = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.param != nullptr) {
      n.param->grad += n.grad;
    } else if (n.back) {
      n.back(*this, id);
    }
  }
}

// ---- broadcasting helpers ---------------------------------------------------

namespace {

enum class Bcast { kSame, kRow, kCol, kScalar };

Bcast broadcast_kind(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::kSame;
  if (b.rows() == 1 && b.cols() == 1) return Bcast::kScalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::kRow;
  if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::kCol;
  std::ostringstream os;
  os << op << ": incompatible shapes " << a.rows() << "x" << a.cols() << " and "
     << b.rows() << "x" << b.cols();
  throw ConfigError(os.str());
}

Matrix expand(const Matrix& b, Eigen::Index rows, Eigen::Index cols, Bcast k) {
  switch (k) {
    case Bcast::kSame:
      return b;
    case Bcast::kRow:
      return b.replicate(rows, 1);
    case Bcast::kCol:
      return b.replicate(1, cols);
    case Bcast::kScalar:
      return Matrix::Constant(rows, cols, b(0, 0));
  }
  return b;
}

Matrix reduce(const Matrix& g, Bcast k) {
  switch (k) {
    case Bcast::kSame:
      return g;
    case Bcast::kRow:
      return g.colwise().sum();
    case Bcast::kCol:
      return g.rowwise().sum();
    case Bcast::kScalar: {
      Matrix s(1, 1);
      s(0, 0) = g.sum();
      return s;
    }
  }
  return g;
}

template <class F>
Var unary(const Var& a, Matrix value, F local_grad) {
  Graph& g = *a.graph;
  const int ai = a.id;
  return g.push(std::move(value), {a}, [ai, local_grad](Graph& gr, int self) {
    if (!gr.needs_grad(ai)) return;
    gr.grad_slot(ai).array() +=
        gr.grad(self).array() * local_grad(gr.value(ai), gr.value(self)).array();
  });
}

}  // namespace

// ---- operations -------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    std::ostringstream os;
    os << "matmul: shape mismatch " << av.rows() << "x" << av.cols() << " * "
       << bv.rows() << "x" << bv.cols();
    throw ConfigError(os.str());
  }
  Matrix out = av * bv;
  const int ai = a.id;
  const int bi = b.id;
  return a.graph->push(std::move(out), {a, b}, [ai, bi](Graph& g, int self) {
    const Matrix& gr = g.grad(self);
    if (g.needs_grad(ai)) g.grad_slot(ai).noalias() += gr * g.value(bi).transpose();
    if (g.needs_grad(bi)) g.grad_slot(bi).noalias() += g.value(ai).transpose() * gr;
  });
}

Var affine(const Var& x, const Var& w, const Var& b) {
  const Matrix& xv = x.value();
  const Matrix& wv = w.value();
  const Matrix& bv = b.value();
  if (xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols()) {
    std::ostringstream os;
    os << "affine: shape mismatch " << xv.rows() << "x" << xv.cols() << " * " << wv.rows()
       << "x" << wv.cols() << " + " << bv.rows() << "x" << bv.cols();
    throw ConfigError(os.str());
  }
  Matrix out(xv.rows(), wv.cols());
  out.noalias() = xv * wv;
  out.rowwise() += bv.row(0);
  const int xi = x.id;
  const int wi = w.id;
  const int bi = b.id;
  return x.graph->push(std::move(out), {x, w, b}, [xi, wi, bi](Graph& g, int self) {
    const Matrix& gr = g.grad(self);
    if (g.needs_grad(xi)) g.grad_slot(xi).noalias() += gr * g.value(wi).transpose();
    if (g.needs_grad(wi)) g.grad_slot(wi).noalias() += g.value(xi).transpose() * gr;
    if (g.needs_grad(bi)) g.grad_slot(bi) += gr.colwise().sum();
  });
}

Var add(const Var& a, const Var& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Bcast k = broadcast_kind(av, bv, "add");
  Matrix out = av + expand(bv, av.rows(), av.cols(), k);
  const int ai = a.id;
  const int bi = b.id;
  return a.graph->push(std::move(out), {a, b}, [ai, bi, k](Graph& g, int self) {
    const Matrix& gr = g.grad(self);
    if (g.needs_grad(ai)) g.grad_slot(ai) += gr;
    if (g.needs_grad(bi)) g.grad_slot(bi) += reduce(gr, k);
  });
}

Var sub(const Var& a, const Var& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Bcast k = broadcast_kind(av, bv, "sub");
  Matrix out = av - expand(bv, av.rows(), av.cols(), k);
  const int ai = a.id;
  const int bi = b.id;
  return a.graph->push(std::move(out), {a, b}, [ai, bi, k](Graph& g, int self) {
    const Matrix& gr = g.grad(self);
    if (g.needs_grad(ai)) g.grad_slot(ai) += gr;
    if (g.needs_grad(bi)) g.grad_slot(bi) -= reduce(gr, k);
  });
}

Var mul(const Var& a, const Var& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Bcast k = broadcast_kind(av, bv, "mul");
  Matrix out = av.cwiseProduct(expand(bv, av.rows(), av.cols(), k));
  const int ai = a.id;
  const int bi = b.id;
  return a.graph->push(std::move(out), {a, b}, [ai, bi, k](Graph& g, int self) {
    const Matrix& gr = g.grad(self);
    const Matrix& A = g.value(ai);
    const Matrix& B = g.value(bi);
    if (g.needs_grad(ai)) {
      g.grad_slot(ai) += gr.cwiseProduct(expand(B, A.rows(), A.cols(), k));
    }
    if (g.needs_grad(bi)) g.grad_slot(bi) += reduce(gr.cwiseProduct(A), k);
  });
}

Var div(const Var& a, const Var& b) { return mul(a, reciprocal(b)); }

Var scale(const Var& a, double c) {
  return unary(a, a.value() * c, [c](const Matrix& x, const Matrix&) {
    return Matrix::Constant(x.rows(), x.cols(), c);
  });
}

Var add_scalar(const Var& a, double c) {
  Matrix out = a.value().array() + c;
  const int ai = a.id;
  return a.graph->push(std::move(out), {a}, [ai](Graph& g, int self) {
    if (g.needs_grad(ai)) g.grad_slot(ai) += g.grad(self);
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

// Eigen has no packet tanh for double, and scalar libm dominated profiles.
// Built on the vectorized exp; a short odd series covers |x| < 0.02 where
// 1 - exp(-2|x|) would lose digits.
Matrix tanh_values(const Matrix& x) {
  Matrix out = (-2.0 * x.array().abs()).exp().matrix();
  const double* xs = x.data();
  double* ys = out.data();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = xs[i];
    const double v2 = v * v;
    const double series = v * (1.0 + v2 * (-1.0 / 3.0 + v2 * (2.0 / 15.0 + v2 * (-17.0 / 315.0))));
    const double big = std::copysign((1.0 - ys[i]) / (1.0 + ys[i]), v);
    ys[i] = std::abs(v) < 0.02 ? series : big;
  }
  return out;
}

Var tanh(const Var& a) {
  Matrix out = tanh_values(a.value());
  return unary(a, std::move(out), [](const Matrix&, const Matrix& y) {
    return Matrix((1.0 - y.array().square()).matrix());
  });
}

Var sigmoid(const Var& a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return unary(a, std::move(out), [](const Matrix&, const Matrix& y) {
    return Matrix((y.array() * (1.0 - y.array())).matrix());
  });
}

Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return unary(a, std::move(out), [](const Matrix& x, const Matrix&) {
    return Matrix((x.array() > 0.0).cast<double>().matrix());
  });
}

Var exp(const Var& a) {
  Matrix out = a.value().array().exp();
  return unary(a, std::move(out), [](const Matrix&, const Matrix& y) { return y; });
}

Var log(const Var& a) {
  Matrix out = a.value().array().log();
  return unary(a, std::move(out), [](const Matrix& x, const Matrix&) {
    return Matrix(x.array().inverse().matrix());
  });
}

Var square(const Var& a) {
  Matrix out = a.value().array().square();
  return unary(a, std::move(out), [](const Matrix& x, const Matrix&) {
    return Matrix((2.0 * x.array()).matrix());
  });
}

Var reciprocal(const Var& a) {
  Matrix out = a.value().array().inverse();
  return unary(a, std::move(out), [](const Matrix&, const Matrix& y) {
    return Matrix((-y.array().square()).matrix());
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return unary(a, std::move(out), [lo, hi](const Matrix& x, const Matrix&) {
    return Matrix(((x.array() >= lo) && (x.array() <= hi)).cast<double>().matrix());
  });
}

Var minimum(const Var& a, const Var& b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) {
    throw ConfigError("minimum: shape mismatch");
  }
  Matrix out = av.cwiseMin(bv);
  const int ai = a.id;
  const int bi = b.id;
  return a.graph->push(std::move(out), {a, b}, [ai, bi](Graph& g, int self) {
    const Matrix& gr = g.grad(self);
    const auto take_a = (g.value(ai).array() <= g.value(bi).array()).cast<double>();
    if (g.needs_grad(ai)) g.grad_slot(ai).array() += gr.array() * take_a;
    if (g.needs_grad(bi)) g.grad_slot(bi).array() += gr.array() * (1.0 - take_a);
  });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int ai = a.id;
  return a.graph->push(std::move(out), {a}, [ai](Graph& g, int self) {
    if (g.needs_grad(ai)) g.grad_slot(ai).array() += g.grad(self)(0, 0);
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var sum_rows(const Var& a) {
  Matrix out = a.value().colwise().sum();
  const int ai = a.id;
  return a.graph->push(std::move(out), {a}, [ai](Graph& g, int self) {
    if (g.needs_grad(ai)) g.grad_slot(ai).rowwise() += g.grad(self).row(0);
  });
}

Var sum_cols(const Var& a) {
  Matrix out = a.value().rowwise().sum();
  const int ai = a.id;
  return a.graph->push(std::move(out), {a}, [ai](Graph& g, int self) {
    if (g.needs_grad(ai)) g.grad_slot(ai).colwise() += g.grad(self).col(0);
  });
}

Var segment_sum_rows(const Var& a, Eigen::Index segment) {
  const Matrix& av = a.value();
  if (segment <= 0 || av.rows() % segment != 0) {
    throw ConfigError("segment_sum_rows: rows not divisible by segment size");
  }
  const Eigen::Index groups = av.rows() / segment;
  Matrix out(groups, av.cols());
  for (Eigen::Index s = 0; s < groups; ++s) {
    out.row(s) = av.middleRows(s * segment, segment).colwise().sum();
  }
  const int ai = a.id;
  return a.graph->push(std::move(out), {a}, [ai, segment, groups](Graph& g, int self) {
    if (!g.needs_grad(ai)) return;
    Matrix& ga = g.grad_slot(ai);
    const Matrix& gr = g.grad(self);
    for (Eigen::Index s = 0; s < groups; ++s) {
      ga.middleRows(s * segment, segment).rowwise() += gr.row(s);
    }
  });
}

Var repeat_rows(const Var& a, Eigen::Index times) {
  const Matrix& av = a.value();
  if (av.rows() != 1) throw ConfigError("repeat_rows expects a single row");
  Matrix out = av.replicate(times, 1);
  const int ai = a.id;
  return a.graph->push(std::move(out), {a}, [ai](Graph& g, int self) {
    if (g.needs_grad(ai)) g.grad_slot(ai) += g.grad(self).colwise().sum();
  });
}

Var repeat_each_row(const Var& a, Eigen::Index times) {
  const Matrix& av = a.value();
  Matrix out(av.rows() * times, av.cols());
  for (Eigen::Index s = 0; s < av.rows(); ++s) {
    out.middleRows(s * times, times) = av.row(s).replicate(times, 1);
  }
  const int ai = a.id;
  const Eigen::Index rows = av.rows();
  return a.graph->push(std::move(out), {a}, [ai, times, rows](Graph& g, int self) {
    if (!g.needs_grad(ai)) return;
    Matrix& ga = g.grad_slot(ai);
    const Matrix& gr = g.grad(self);
    for (Eigen::Index s = 0; s < rows; ++s) {
      ga.row(s) += gr.middleRows(s * times, times).colwise().sum();
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols of nothing");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ConfigError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    layout.emplace_back(p.id, at);
    at += p.cols();
  }
  return parts.front().graph->push(std::move(out), parts, [layout](Graph& g, int self) {
    const Matrix& gr = g.grad(self);
    for (const auto& [id, start] : layout) {
      if (!g.needs_grad(id)) continue;
      Matrix& gp = g.grad_slot(id);
      gp += gr.middleCols(start, gp.cols());
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows of nothing");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ConfigError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> layout;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    layout.emplace_back(p.id, at);
    at += p.rows();
  }
  return parts.front().graph->push(std::move(out), parts, [layout](Graph& g, int self) {
    const Matrix& gr = g.grad(self);
    for (const auto& [id, start] : layout) {
      if (!g.needs_grad(id)) continue;
      Matrix& gp = g.grad_slot(id);
      gp += gr.middleRows(start, gp.rows());
    }
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  const Matrix& av = a.value();
  if (start < 0 || count < 0 || start + count > av.cols()) {
    throw ConfigError("slice_cols out of range");
  }
  Matrix out = av.middleCols(start, count);
  const int ai = a.id;
  return a.graph->push(std::move(out), {a}, [ai, start, count](Graph& g, int self) {
    if (g.needs_grad(ai)) g.grad_slot(ai).middleCols(start, count) += g.grad(self);
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  const Matrix& av = a.value();
  if (start < 0 || count < 0 || start + count > av.rows()) {
    throw ConfigError("slice_rows out of range");
  }
  Matrix out = av.middleRows(start, count);
  const int ai = a.id;
  return a.graph->push(std::move(out), {a}, [ai, start, count](Graph& g, int self) {
    if (g.needs_grad(ai)) g.grad_slot(ai).middleRows(start, count) += g.grad(self);
  });
}

Var gaussian_log_prob(const Var& mean, const Var& log_std, const Var& x) {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  Var z = mul(sub(x, mean), exp(neg(log_std)));
  Var per_dim = sub(scale(square(z), -0.5), log_std);
  return add_scalar(sum_cols(per_dim), -half_log_2pi * static_cast<double>(x.cols()));
}

Var reparam_sample(const Var& mean, const Var& log_std, const Var& noise) {
  if (noise.cols() != mean.cols()) {
    throw ConfigError("reparam_sample: noise dimension does not match head");
  }
  return add(mean, mul(noise, exp(log_std)));
}

// ---- layers -----------------------------------------------------------------

Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "relu") return Activation::kRelu;
  if (name == "identity" || name == "linear") return Activation::kIdentity;
  throw ConfigError("unknown activation: " + std::string(name));
}

Var activate(const Var& x, Activation act) {
  switch (act) {
    case Activation::kTanh:
      return tanh(x);
    case Activation::kRelu:
      return relu(x);
    case Activation::kIdentity:
      return x;
  }
  return x;
}

Dense::Dense(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
             double init_scale)
    : in_(in), out_(out) {
  if (in <= 0 || out <= 0) throw ConfigError("Dense: non-positive size in " + name);
  const double limit = init_scale * std::sqrt(3.0 / in);
  Matrix w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-limit, limit);
  w_ = store.add(name + "/w", std::move(w));
  b_ = store.add(name + "/b", Matrix::Zero(1, out));
}

Var Dense::forward(Graph& g, ParamStore& store, const Var& x) const {
  if (x.cols() != in_) {
    std::ostringstream os;
    os << "Dense: expected input width " << in_ << ", got " << x.cols();
    throw ConfigError(os.str());
  }
  return affine(x, g.param(store, w_), g.param(store, b_));
}

Mlp::Mlp(ParamStore& store, const std::string& prefix, std::vector<int> sizes,
         Activation hidden, Rng& rng, double last_init_scale)
    : sizes_(std::move(sizes)), hidden_(hidden) {
  if (sizes_.size() < 2) throw ConfigError("Mlp needs at least input and output sizes");
  for (std::size_t i = 0; i + 1 < sizes_.size(); ++i) {
    const bool last = i + 2 == sizes_.size();
    layers_.emplace_back(store, prefix + "/l" + std::to_string(i), sizes_[i],
                         sizes_[i + 1], rng, last ? last_init_scale : 1.0);
  }
}

Var Mlp::forward(Graph& g, ParamStore& store, const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(g, store, h);
    if (i + 1 < layers_.size()) h = activate(h, hidden_);
  }
  return h;
}

Matrix Mlp::evaluate(ParamStore& store, const Matrix& x) const {
  Graph g;
  return forward(g, store, g.constant(x)).value();
}

std::vector<std::size_t> Mlp::weight_indices() const {
  std::vector<std::size_t> out;
  for (const auto& l : layers_) out.push_back(l.weight_index());
  return out;
}

Matrix orthogonal_init(int rows, int cols, Rng& rng, double gain) {
  const bool tall = rows >= cols;
  const int r = tall ? rows : cols;
  const int c = tall ? cols : rows;
  Eigen::MatrixXd a(r, c);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(r, c);
  const Eigen::MatrixXd rr = qr.matrixQR().topRows(c).triangularView<Eigen::Upper>();
  for (int j = 0; j < c; ++j) {
    if (rr(j, j) < 0) q.col(j) *= -1.0;
  }
  Matrix out = tall ? Matrix(q) : Matrix(q.transpose());
  return gain * out;
}

LstmCell::LstmCell(ParamStore& store, const std::string& prefix, int input, int hidden,
                   Rng& rng)
    : input_(input), hidden_(hidden) {
  if (input <= 0 || hidden <= 0) throw ConfigError("LstmCell: non-positive size");
  const double limit = std::sqrt(3.0 / input);
  Matrix wx(input, 4 * hidden);
  for (Eigen::Index i = 0; i < wx.size(); ++i) wx.data()[i] = rng.uniform(-limit, limit);
  Matrix wh(hidden, 4 * hidden);
  for (int k = 0; k < 4; ++k) {
    wh.middleCols(k * hidden, hidden) = orthogonal_init(hidden, hidden, rng);
  }
  Matrix b = Matrix::Zero(1, 4 * hidden);
  b.middleCols(hidden, hidden).setOnes();
  wx_ = store.add(prefix + "/wx", std::move(wx));
  wh_ = store.add(prefix + "/wh", std::move(wh));
  b_ = store.add(prefix + "/b", std::move(b));
}

LstmCell::State LstmCell::step(Graph& g, ParamStore& store, const Var& x,
                               const State& prev) const {
  if (x.cols() != input_) {
    std::ostringstream os;
    os << "LstmCell: expected input width " << input_ << ", got " << x.cols();
    throw ConfigError(os.str());
  }
  if (prev.h.rows() != x.rows() || prev.h.cols() != hidden_) {
    throw ConfigError("LstmCell: carry does not match the batch");
  }
  const Var wx = g.param(store, wx_);
  const Var wh = g.param(store, wh_);
  const Var bias = g.param(store, b_);
  const Eigen::Index n = x.rows();
  const Eigen::Index h = hidden_;

  // One fused node holding [h | c]; gate activations are kept for backward.
  Matrix act(n, 4 * h);
  act.noalias() = x.value() * wx.value();
  act.noalias() += prev.h.value() * wh.value();
  act.rowwise() += bias.value().row(0);
  const Matrix cand = tanh_values(act.middleCols(2 * h, h));
  act = (1.0 / (1.0 + (-act.array()).exp())).matrix();
  act.middleCols(2 * h, h) = cand;
  const Matrix& c_prev = prev.c.value();
  Matrix out(n, 2 * h);
  out.rightCols(h) = act.leftCols(h).cwiseProduct(cand) +
                     act.middleCols(h, h).cwiseProduct(c_prev);
  const Matrix tc = tanh_values(out.rightCols(h));
  out.leftCols(h) = act.rightCols(h).cwiseProduct(tc);

  const int xi = x.id, hi = prev.h.id, ci = prev.c.id;
  const int wxi = wx.id, whi = wh.id, bi = bias.id;
  auto state = std::make_shared<std::pair<Matrix, Matrix>>(std::move(act), tc);
  Var joint = g.push(std::move(out), {x, prev.h, prev.c, wx, wh, bias},
                     [=](Graph& gr, int self) {
    const Matrix& a = state->first;
    const Matrix& t = state->second;
    const Matrix& go = gr.grad(self);
    const auto i_g = a.leftCols(h).array();
    const auto f_g = a.middleCols(h, h).array();
    const auto c_g = a.middleCols(2 * h, h).array();
    const auto o_g = a.rightCols(h).array();
    const auto dh = go.leftCols(h).array();
    const Eigen::Index rows = a.rows();
    Matrix dc = (go.rightCols(h).array() + dh * o_g * (1.0 - t.array().square())).matrix();
    Matrix dgates(rows, 4 * h);
    dgates.leftCols(h) = (dc.array() * c_g * i_g * (1.0 - i_g)).matrix();
    dgates.middleCols(h, h) =
        (dc.array() * gr.value(ci).array() * f_g * (1.0 - f_g)).matrix();
    dgates.middleCols(2 * h, h) = (dc.array() * i_g * (1.0 - c_g.square())).matrix();
    dgates.rightCols(h) = (dh * t.array() * o_g * (1.0 - o_g)).matrix();
    if (gr.needs_grad(ci)) gr.grad_slot(ci).array() += dc.array() * f_g;
    if (gr.needs_grad(xi)) gr.grad_slot(xi).noalias() += dgates * gr.value(wxi).transpose();
    if (gr.needs_grad(hi)) gr.grad_slot(hi).noalias() += dgates * gr.value(whi).transpose();
    if (gr.needs_grad(wxi)) gr.grad_slot(wxi).noalias() += gr.value(xi).transpose() * dgates;
    if (gr.needs_grad(whi)) gr.grad_slot(whi).noalias() += gr.value(hi).transpose() * dgates;
    if (gr.needs_grad(bi)) gr.grad_slot(bi) += dgates.colwise().sum();
  });
  return {slice_cols(joint, 0, h), slice_cols(joint, h, h)};
}

std::vector<Var> LstmCell::run(Graph& g, ParamStore& store, const std::vector<Var>& xs,
                               State init) const {
  std::vector<Var> out;
  out.reserve(xs.size());
  State s = init;
  for (const Var& x : xs) {
    s = step(g, store, x, s);
    out.push_back(s.h);
  }
  return out;
}

LstmCell::State LstmCell::zero_state(Graph& g, Eigen::Index batch) const {
  return {g.constant(Matrix::Zero(batch, hidden_)), g.constant(Matrix::Zero(batch, hidden_))};
}

Var l2_penalty(Graph& g, ParamStore& store, const std::vector<std::size_t>& indices,
               double weight) {
  std::vector<Var> terms;
  for (std::size_t i : indices) terms.push_back(sum(square(g.param(store, i))));
  if (terms.empty()) return g.constant_scalar(0.0);
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return scale(total, weight);
}

// ---- optimizer --------------------------------------------------------------

void adam_step(ParamStore& store, double lr, const AdamConfig& cfg) {
  for (const auto& p : store.params()) {
    if (!p.grad.allFinite()) {
      std::ostringstream os;
      os << "non-finite gradient in '" << p.name << "' (|g|max="
         << p.grad.cwiseAbs().maxCoeff() << "); step aborted at optimizer step "
         << store.optimizer_steps;
      store.zero_grad();
      throw NumericError(os.str());
    }
  }
  const std::int64_t t = ++store.optimizer_steps;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& p : store.params()) {
    p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * p.grad;
    p.v.array() = cfg.beta2 * p.v.array() + (1.0 - cfg.beta2) * p.grad.array().square();
    p.value.array() -=
        lr * (p.m.array() / c1) / ((p.v.array() / c2).sqrt() + cfg.eps);
    p.grad.setZero();
  }
}

double clip_grad_norm(ParamStore& store, double max_norm) {
  const double norm = store.grad_norm();
  if (std::isfinite(norm) && norm > max_norm && max_norm > 0) {
    const double f = max_norm / norm;
    for (auto& p : store.params()) p.grad *= f;
  }
  return norm;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'S', '2', 'R', 'C', 'K', 'P', 'T', '\0'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ConfigError("checkpoint truncated");
  return v;
}

std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw ConfigError("checkpoint truncated");
  return s;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw StageError("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.metadata.size()));
  os.write(ckpt.metadata.data(), static_cast<std::streamsize>(ckpt.metadata.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put<std::uint32_t>(os, 2);
    put<std::uint64_t>(os, static_cast<std::uint64_t>(a.value.rows()));
    put<std::uint64_t>(os, static_cast<std::uint64_t>(a.value.cols()));
    os.write(reinterpret_cast<const char*>(a.value.data()),
             static_cast<std::streamsize>(a.value.size() * sizeof(double)));
  }
  if (!os) throw StageError("failed writing checkpoint: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 8, kMagic)) {
    throw ConfigError("not a checkpoint file: " + path.string());
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.metadata = get_string(is);
  const auto count = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = get_string(is);
    const auto rank = get<std::uint32_t>(is);
    if (rank != 2) throw ConfigError("unsupported array rank in " + a.name);
    const auto rows = get<std::uint64_t>(is);
    const auto cols = get<std::uint64_t>(is);
    a.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    is.read(reinterpret_cast<char*>(a.value.data()),
            static_cast<std::streamsize>(a.value.size() * sizeof(double)));
    if (!is) throw ConfigError("checkpoint truncated in " + a.name);
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

Checkpoint snapshot(const ParamStore& store, std::string metadata,
                    bool include_optimizer_state) {
  Checkpoint ckpt;
  ckpt.metadata = std::move(metadata);
  for (const auto& p : store.params()) {
    ckpt.arrays.push_back({p.name, p.value});
    if (include_optimizer_state) {
      ckpt.arrays.push_back({p.name + "@m", p.m});
      ckpt.arrays.push_back({p.name + "@v", p.v});
    }
  }
  if (include_optimizer_state) {
    Matrix steps(1, 1);
    steps(0, 0) = static_cast<double>(store.optimizer_steps);
    ckpt.arrays.push_back({"@optimizer_steps", steps});
  }
  return ckpt;
}

void restore(ParamStore& store, const Checkpoint& ckpt) {
  std::size_t matched = 0;
  for (const auto& a : ckpt.arrays) {
    if (a.name == "@optimizer_steps") {
      store.optimizer_steps = static_cast<std::int64_t>(a.value(0, 0));
      continue;
    }
    std::string base = a.name;
    char slot = 'w';
    if (const auto at = a.name.rfind('@'); at != std::string::npos) {
      base = a.name.substr(0, at);
      slot = a.name[at + 1];
    }
    if (!store.contains(base)) {
      throw ConfigError("checkpoint array '" + a.name + "' has no matching parameter");
    }
    Param& p = store.at(std::string_view(base));
    if (p.value.rows() != a.value.rows() || p.value.cols() != a.value.cols()) {
      throw ConfigError("shape mismatch restoring '" + a.name + "'");
    }
    if (slot == 'm') {
      p.m = a.value;
    } else if (slot == 'v') {
      p.v = a.value;
    } else {
      p.value = a.value;
      ++matched;
    }
  }
  if (matched != store.size()) {
    throw ConfigError("checkpoint covers " + std::to_string(matched) + " of " +
                      std::to_string(store.size()) + " parameters");
  }
}

}  // namespace sim2rec::nn
