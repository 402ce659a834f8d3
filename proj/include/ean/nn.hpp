#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ean/ops.hpp"

namespace ean {

// ---- convolution ------------------------------------------------------------

// Which axes of a [B, C, T, H, W] tensor a convolution runs over. Spatial
// convolutions slide over (H, W) independently per time step; temporal ones
// slide over T independently per spatial site; full-3d slides over all three.
enum class ConvKind { Spatial2D, Temporal1D, Full3D };

struct ConvSpec {
  ConvKind kind = ConvKind::Full3D;
  std::vector<std::int64_t> kernel;    // one odd extent per convolved axis
  std::vector<std::int64_t> stride;    // empty = all ones
  std::vector<std::int64_t> dilation;  // empty = all ones
  std::int64_t groups = 1;
  // Explicit symmetric zero padding per convolved axis; empty selects "same"
  // padding, under which every output extent is ceil(input / stride).
  std::vector<std::int64_t> padding;

  int axes() const {
    return kind == ConvKind::Spatial2D ? 2 : (kind == ConvKind::Temporal1D ? 1 : 3);
  }
  // Fills stride/dilation defaults and validates invariants (odd kernel
  // extents, positive groups, consistent vector lengths). Throws on violation.
  ConvSpec normalized() const;
};

ConvSpec conv_spec(ConvKind kind, std::vector<std::int64_t> kernel,
                   std::vector<std::int64_t> stride = {},
                   std::vector<std::int64_t> dilation = {},
                   std::int64_t groups = 1);

// Patch gathering ("im2col"): x is [N, C, S1..Sm]; the result is
// [N, C*prod(kernel), prod(out_extents)], where column j holds the zero-padded
// receptive field of output position j. The backward pass is the transposed
// scatter-add. Kernel extents need not be odd here.
Tensor unfold(const Tensor& x, const std::vector<std::int64_t>& kernel,
              const std::vector<std::int64_t>& stride,
              const std::vector<std::int64_t>& dilation,
              const std::vector<std::int64_t>& pad_lo,
              const std::vector<std::int64_t>& out_extents);

// Grouped dilated convolution of x: [B, C_in, T, H, W] with
// w: [C_out, C_in/groups, *kernel] (kernel axes per ConvSpec::kind).
// Lowered to unfold + matmul, so every multiply-accumulate is visible to
// MacCounter. Grouped convolution mixes channels only within a group.
Tensor conv(const Tensor& x, const Tensor& w, const ConvSpec& spec);

// Direct nested-loop reference implementation of the same contract; forward
// values only (no autograd), used as the trusted oracle.
Tensor conv_oracle(const Tensor& x, const Tensor& w, const ConvSpec& spec);

// ---- pooling ----------------------------------------------------------------

enum class PoolKind { Max, Avg };

// Pooling over the (T, H, W) axes of a [B, C, T, H, W] tensor. `kernel` and
// `stride` give one extent per pooled axis; empty `padding` selects "same"
// (output extent = ceil(input / stride)). Max pooling treats padding as -inf
// (pad sites never win); average pooling divides by the count of valid
// (non-pad) positions in each window.
Tensor pool3d(const Tensor& x, PoolKind kind, std::vector<std::int64_t> kernel,
              std::vector<std::int64_t> stride,
              std::vector<std::int64_t> padding = {});

// Arithmetic mean over the named axes (negative axes allowed), squeezing them.
Tensor global_avg_pool(const Tensor& x, const std::vector<int>& axes);

// ---- normalization ----------------------------------------------------------

// Batch normalization along `channel_axis`. Training mode normalizes with
// batch statistics over all other axes (biased variance) and updates the
// running buffers in place with momentum: new = (1-m)*old + m*batch. Eval mode
// normalizes with the running buffers and has no side effects. eps = 1e-5.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 const Tensor& running_mean, const Tensor& running_var,
                 bool training, int channel_axis = 1, double momentum = 0.1,
                 double eps = 1e-5);

// ---- linear / attention -----------------------------------------------------

// Affine map on the trailing axis: y = x @ w (+ b). w is [d_in, d_out],
// b (optional, pass undefined Tensor to skip) is [d_out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor());

// Standard multi-head self-attention over tokens [B, L, d] with bias-free
// projections wq/wk/wv/wo (each [d, d]). Per head: scores = Q K^T / sqrt(d/h),
// row softmax, weighted sum of V; heads concatenated then output-projected.
Tensor multihead_self_attention(const Tensor& tokens, const Tensor& wq,
                                const Tensor& wk, const Tensor& wv,
                                const Tensor& wo, std::int64_t heads);

// ---- misc -------------------------------------------------------------------

// Overwrite dst's values with src's (same shape and dtype). Used for running
// statistics and checkpoint loading; never touches autograd state.
void copy_values(const Tensor& dst, const Tensor& src);

// ---- module system ----------------------------------------------------------

// Minimal parameter container: modules register parameters (trainable),
// buffers (persistent non-trainable state, e.g. running statistics) and child
// modules; named_* walk the tree with dot-joined names in registration order.
class Module {
 public:
  virtual ~Module() = default;

  void train(bool on = true);
  void eval() { train(false); }
  bool is_training() const { return training_; }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  // Parameters followed by buffers; the full persistent state of the module.
  std::vector<std::pair<std::string, Tensor>> named_state() const;
  std::vector<Tensor> parameters() const;
  void zero_grad();

 protected:
  Tensor register_parameter(const std::string& name, Tensor t);
  Tensor register_buffer(const std::string& name, Tensor t);
  template <typename M>
  std::shared_ptr<M> register_module(const std::string& name, std::shared_ptr<M> m) {
    children_.emplace_back(name, m);
    return m;
  }

 private:
  void collect(const std::string& prefix, bool with_buffers,
               std::vector<std::pair<std::string, Tensor>>& out) const;

  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Tensor>> buffers_;
  std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
  bool training_ = true;
};

// ---- layers -----------------------------------------------------------------

class Conv : public Module {
 public:
  // He-normal weight init (stddev sqrt(2 / fan_in)) drawn from `rng`;
  // zero_init zeroes the weight instead (used for transparent projections).
  Conv(std::int64_t in_channels, std::int64_t out_channels, ConvSpec spec,
       bool with_bias, DType dt, Rng& rng, bool zero_init = false);
  Tensor forward(const Tensor& x);

  Tensor w, b;  // b undefined when constructed without bias
  ConvSpec spec;
  std::int64_t in_channels = 0, out_channels = 0;
};

class BatchNorm : public Module {
 public:
  explicit BatchNorm(std::int64_t channels, int channel_axis = 1,
                     DType dt = DType::f32);
  Tensor forward(const Tensor& x);

  Tensor gamma, beta, running_mean, running_var;
  std::int64_t channels = 0;
  int channel_axis = 1;
};

class Linear : public Module {
 public:
  Linear(std::int64_t d_in, std::int64_t d_out, bool with_bias, DType dt,
         Rng& rng, bool zero_init = false);
  Tensor forward(const Tensor& x);

  Tensor w, b;  // w: [d_in, d_out]
  std::int64_t d_in = 0, d_out = 0;
};

class MultiheadSelfAttention : public Module {
 public:
  // zero_init_out zeroes the output projection so the enclosing residual
  // block starts as an identity map.
  MultiheadSelfAttention(std::int64_t dim, std::int64_t heads, DType dt,
                         Rng& rng, bool zero_init_out = false);
  Tensor forward(const Tensor& tokens);

  Tensor wq, wk, wv, wo;
  std::int64_t dim = 0, heads = 0;
};

}  // namespace ean
