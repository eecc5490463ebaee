#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace diffdet3d {

/// Ordered set of named dense parameter blocks. Every mutation bumps the
/// revision so activation tapes can detect that they were recorded against
/// older values.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Eigen::MatrixXd value;
  };

  void add(std::string name, Eigen::MatrixXd value);
  bool contains(std::string_view name) const;

  const Eigen::MatrixXd& at(std::string_view name) const;
  Eigen::MatrixXd& mutable_at(std::string_view name);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& mutable_entries() {
    touch();
    return entries_;
  }

  std::size_t size() const { return entries_.size(); }
  Eigen::Index parameter_count() const;
  std::uint64_t revision() const { return revision_; }
  void touch();

  /// Same names, same shapes, same order.
  bool same_manifest(const ParamStore& other) const;
  ParamStore zeros_like() const;
  void set_zero();
  bool all_finite() const;

  /// this += alpha * other (manifests must match).
  void axpy(double alpha, const ParamStore& other);
  void scale(double alpha);

  /// Flat copy in manifest order (row-major per entry).
  Eigen::VectorXd flatten() const;

  friend bool operator==(const ParamStore& a, const ParamStore& b);

 private:
  std::size_t index_of(std::string_view name) const;

  std::vector<Entry> entries_;
  std::uint64_t revision_ = 0;
};

/// Fully connected stack: widths = {in, h1, ..., out}. ReLU between layers;
/// optionally on the output too.
struct MlpSpec {
  std::string prefix;
  std::vector<int> widths;
  bool relu_output = false;

  int in_width() const { return widths.front(); }
  int out_width() const { return widths.back(); }
  int layers() const { return static_cast<int>(widths.size()) - 1; }
  std::string weight_name(int layer) const { return prefix + ".w" + std::to_string(layer); }
  std::string bias_name(int layer) const { return prefix + ".b" + std::to_string(layer); }

  /// He-uniform weights, zero biases.
  void init(ParamStore& params, std::mt19937_64& rng) const;
};

struct MlpTape {
  std::vector<Eigen::MatrixXd> inputs;  // input to each layer
  std::vector<Eigen::MatrixXd> pre;     // pre-activation of each layer
  std::uint64_t revision = 0;
  const ParamStore* owner = nullptr;
};

struct MlpResult {
  Eigen::MatrixXd output;
  MlpTape tape;
};

/// Row-wise forward: Y = act(X W + b) per layer.
MlpResult mlp_forward(const ParamStore& params, const MlpSpec& spec, const Eigen::MatrixXd& input);

/// Accumulates parameter gradients into `grads` and returns dLoss/dInput.
Eigen::MatrixXd mlp_backward(const ParamStore& params, const MlpSpec& spec, const MlpTape& tape,
                             const Eigen::MatrixXd& output_grad, ParamStore& grads);

struct AdamWConfig {
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimState {
  AdamWConfig config;
  ParamStore first_moment;
  ParamStore second_moment;
  std::int64_t step = 0;

  static OptimState for_params(const ParamStore& params, const AdamWConfig& config);
};

/// Decoupled weight decay followed by a bias-corrected Adam update.
/// Throws on non-finite gradients without touching params or state.
void adamw_step(ParamStore& params, const ParamStore& grads, OptimState& state);

/// teacher <- decay * teacher + (1 - decay) * student.
void ema_update(ParamStore& teacher, const ParamStore& student, double decay);

// Checkpoint byte layout (all integers and floats little-endian):
//   magic "DD3CKPT\0" | u32 version | u32 entry count
//   per entry: u32 name length | name bytes | u32 dtype (1 = f64) | u32 rank (2)
//              | u64 rows | u64 cols
//   then per entry in manifest order: rows*cols f64 values, row-major.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_params(const ParamStore& params);
ParamStore deserialize_params(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params);
ParamStore load_checkpoint(const std::filesystem::path& path);

}  // namespace diffdet3d
