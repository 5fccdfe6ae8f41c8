#pragma once

// Small reverse-mode differentiation layer over Eigen matrices.
//
// Every value is a 2-D row-major matrix whose rows are batch entries. A Graph
// records the operations of one forward pass; backward() walks it in reverse
// and accumulates gradients into the ParamStore that owns the weights.

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "sim2rec/rng.hpp"

namespace sim2rec::nn {

using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix m;  // first moment
  Matrix v;  // second moment
};

// Named weight arrays with gradient accumulators and optimizer moments.
// Parameters are addressed by insertion index; references stay valid as the
// store grows.
class ParamStore {
 public:
  std::size_t add(const std::string& name, Matrix init);

  Param& at(std::size_t index) { return params_.at(index); }
  const Param& at(std::size_t index) const { return params_.at(index); }
  Param& at(std::string_view name);
  const Param& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t num_scalars() const;
  std::deque<Param>& params() { return params_; }
  const std::deque<Param>& params() const { return params_; }

  void zero_grad();
  double grad_norm() const;
  bool grads_finite() const;

  std::int64_t optimizer_steps = 0;

 private:
  std::deque<Param> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

class Graph;

// Handle to a node in a Graph. Cheap to copy; only valid while the Graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix value);
  Var constant_scalar(double value);
  Var param(ParamStore& store, std::size_t index);

  // Accumulates d(loss)/d(param) into every ParamStore reached by the graph.
  // loss must be 1x1. A graph can be differentiated once.
  void backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }
  const Matrix& value(int id) const { return nodes_[id].value; }
  const Matrix& grad(int id) const { return nodes_[id].grad; }

  // Used by op implementations.
  using BackwardFn = std::function<void(Graph&, int)>;
  Var push(Matrix value, std::initializer_list<Var> parents, BackwardFn back);
  Var push(Matrix value, const std::vector<Var>& parents, BackwardFn back);
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  Matrix& grad_slot(int id);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn back;
    Param* param = nullptr;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---- operations -----------------------------------------------------------
// Broadcasting rules for add/sub/mul: rhs may match lhs exactly, be a 1xC row
// (broadcast over rows), an Rx1 column (broadcast over columns), or 1x1.

Var matmul(const Var& a, const Var& b);
// x * w + b with b a single row added to every row.
Var affine(const Var& x, const Var& w, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);
Var tanh(const Var& a);
Matrix tanh_values(const Matrix& x);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var reciprocal(const Var& a);
Var clamp(const Var& a, double lo, double hi);
Var minimum(const Var& a, const Var& b);
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_rows(const Var& a);  // R x C -> 1 x C
Var sum_cols(const Var& a);  // R x C -> R x 1
Var segment_sum_rows(const Var& a, Eigen::Index segment);  // (S*k) x C -> S x C
Var repeat_rows(const Var& a, Eigen::Index times);         // 1 x C -> times x C
Var repeat_each_row(const Var& a, Eigen::Index times);     // S x C -> (S*times) x C
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// Row-wise diagonal Gaussian log-density, summed over columns: R x 1.
Var gaussian_log_prob(const Var& mean, const Var& log_std, const Var& x);

// mean + exp(log_std) * noise.
Var reparam_sample(const Var& mean, const Var& log_std, const Var& noise);

// ---- layers -------------------------------------------------------------

enum class Activation { kTanh, kRelu, kIdentity };

Activation parse_activation(std::string_view name);
Var activate(const Var& x, Activation act);

// Fully connected layer y = x W + b with W stored as in x out.
class Dense {
 public:
  Dense() = default;
  // Scaled-uniform fan-in initialization: U(-s*sqrt(3/in), s*sqrt(3/in)).
  Dense(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
        double init_scale = 1.0);

  Var forward(Graph& g, ParamStore& store, const Var& x) const;
  int in() const { return in_; }
  int out() const { return out_; }
  std::size_t weight_index() const { return w_; }

 private:
  int in_ = 0;
  int out_ = 0;
  std::size_t w_ = 0;
  std::size_t b_ = 0;
};

// Stack of Dense layers; hidden layers use `hidden`, the last is linear.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& prefix, std::vector<int> sizes,
      Activation hidden, Rng& rng, double last_init_scale = 1.0);

  Var forward(Graph& g, ParamStore& store, const Var& x) const;
  // Convenience: forward on a throwaway graph.
  Matrix evaluate(ParamStore& store, const Matrix& x) const;

  int in_dim() const { return sizes_.empty() ? 0 : sizes_.front(); }
  int out_dim() const { return sizes_.empty() ? 0 : sizes_.back(); }
  const std::vector<int>& sizes() const { return sizes_; }
  std::vector<std::size_t> weight_indices() const;
  Activation hidden_activation() const { return hidden_; }

 private:
  std::vector<int> sizes_;
  std::vector<Dense> layers_;
  Activation hidden_ = Activation::kTanh;
};

// LSTM-style gated recurrent cell. Gate layout in the packed weights is
// [input, forget, candidate, output].
class LstmCell {
 public:
  struct State {
    Var h;
    Var c;
  };

  LstmCell() = default;
  // Input weights use fan-in uniform init, recurrent weights are orthogonal
  // per gate, forget-gate bias starts at 1.
  LstmCell(ParamStore& store, const std::string& prefix, int input, int hidden,
           Rng& rng);

  State step(Graph& g, ParamStore& store, const Var& x, const State& prev) const;
  std::vector<Var> run(Graph& g, ParamStore& store, const std::vector<Var>& xs,
                       State init) const;
  State zero_state(Graph& g, Eigen::Index batch) const;

  int input_size() const { return input_; }
  int hidden_size() const { return hidden_; }
  std::vector<std::size_t> weight_indices() const { return {wx_, wh_}; }

 private:
  int input_ = 0;
  int hidden_ = 0;
  std::size_t wx_ = 0;
  std::size_t wh_ = 0;
  std::size_t b_ = 0;
};

// Random matrix with orthonormal columns (or rows, whichever is smaller).
Matrix orthogonal_init(int rows, int cols, Rng& rng, double gain = 1.0);

// Sum of squared entries of the given parameters, times `weight`.
Var l2_penalty(Graph& g, ParamStore& store,
               const std::vector<std::size_t>& indices, double weight);

// ---- optimizer ----------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment update with bias correction. Throws NumericError (and
// leaves weights untouched, gradients zeroed) when any gradient is non-finite.
void adam_step(ParamStore& store, double lr, const AdamConfig& cfg = {});

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(ParamStore& store, double max_norm);

// ---- checkpoints ----------------------------------------------------------

struct NamedArray {
  std::string name;
  Matrix value;
};

struct Checkpoint {
  std::string metadata;  // free-form, JSON by convention
  std::vector<NamedArray> arrays;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary container: magic "S2RCKPT\0", u32 version, u32 metadata length +
// bytes, u32 array count, then per array: u32 name length + bytes, u32 rank
// (always 2), u64 rows, u64 cols, rows*cols little-endian f64 (row-major).
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Optimizer moments are stored as "<name>@m" / "<name>@v" when requested.
Checkpoint snapshot(const ParamStore& store, std::string metadata,
                    bool include_optimizer_state = false);
// Copies arrays into an existing store; names and shapes must match.
void restore(ParamStore& store, const Checkpoint& ckpt);

}  // namespace sim2rec::nn
