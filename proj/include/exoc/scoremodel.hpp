#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

#include "exoc/numkernel.hpp"

namespace exoc {

struct PairRef {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
};

/// Scalar observed feature x_{u,i}.
struct ScalarFeature {
  double x = 0.0;
};

using ScoreInput = std::variant<PairRef, ScalarFeature>;

enum class ModelKind : std::uint8_t {
  matrix_factorization = 1,
  scalar_linear = 2,
  scalar_mlp = 3,
};

enum class InputKind { pair, scalar };

const char* model_kind_name(ModelKind kind);

struct GradBuffer {
  std::vector<double> params;

  explicit GradBuffer(std::size_t n = 0) : params(n, 0.0) {}
  void zero();
};

// Score head g(x; theta). Parameters live in one flat vector whose layout is
// fixed by the kind:
//   matrix_factorization  [P (m*k) | Q (n*k) | user bias (m) | item bias (n) | global]
//   scalar_linear         [weight, bias]
//   scalar_mlp            per layer [W (out*in) row-major | b (out)], tanh hidden
//                         activations, linear output
class ScoreModel {
 public:
  static ScoreModel matrix_factorization(std::size_t users, std::size_t items, std::size_t dim);
  static ScoreModel scalar_linear();
  static ScoreModel scalar_mlp(std::vector<std::size_t> hidden);

  ModelKind kind() const { return kind_; }
  InputKind input_kind() const {
    return kind_ == ModelKind::matrix_factorization ? InputKind::pair : InputKind::scalar;
  }
  std::size_t users() const { return users_; }
  std::size_t items() const { return items_; }
  std::size_t dim() const { return dim_; }
  const std::vector<std::size_t>& hidden() const { return hidden_; }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }
  std::size_t num_params() const { return params_.size(); }
  GradBuffer make_grad() const { return GradBuffer(params_.size()); }

  /// Embeddings / weights ~ N(0, scale^2), biases zero.
  void init(RngStream& rng, double scale = 0.1);

  /// Throws ValidationError when the input alternative does not match
  /// input_kind(), or when a pair is out of range.
  double score(const ScoreInput& in) const;

  /// buf += upstream * d score / d theta. Only parameters touched by the
  /// input are written.
  void accumulate_grad(const ScoreInput& in, double upstream, GradBuffer& buf) const;

  bool operator==(const ScoreModel& other) const = default;

 private:
  ScoreModel(ModelKind kind, std::size_t users, std::size_t items, std::size_t dim,
             std::vector<std::size_t> hidden, std::size_t n_params);

  PairRef pair_of(const ScoreInput& in) const;
  double feature_of(const ScoreInput& in) const;
  double mlp_forward(double x, std::vector<std::vector<double>>* acts) const;

  ModelKind kind_;
  std::size_t users_ = 0;
  std::size_t items_ = 0;
  std::size_t dim_ = 0;
  std::vector<std::size_t> hidden_;
  std::vector<double> params_;
};

/// Correlation rho = tanh(raw), strictly inside (-1, 1).
inline constexpr double kMaxAbsRho = 1.0 - 1e-12;

struct CorrelationParam {
  double raw = 0.0;

  double value() const;
  /// d value / d raw = 1 - value^2.
  double jacobian() const;
  static CorrelationParam from_value(double rho);
  bool operator==(const CorrelationParam&) const = default;
};

struct Checkpoint {
  ScoreModel model_o;
  ScoreModel model_r;
  CorrelationParam corr;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Binary layout (little endian): "EXOC", u16 version, then per model
/// (selection head first) u8 kind, u64 m, u64 n, u64 k, u32 hidden count,
/// u64 hidden widths, u64 parameter count, f64 parameters; then f64 rho_raw
/// and a CRC-32 of every preceding byte.
void save_checkpoint(const ScoreModel& model_o, const ScoreModel& model_r,
                     const CorrelationParam& corr, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Throws ShapeError when a pair-based model was trained on other
/// dimensions.
void check_model_shape(const ScoreModel& model, std::size_t users, std::size_t items);

}  // namespace exoc
