#pragma once

#include <cstdint>

#include "hybriddyn/errors.hpp"
#include "hybriddyn/types.hpp"

namespace hybriddyn::features {

/// State feature map: either graded-lexicographic polynomial monomials with a
/// leading constant term, or random Fourier cosines with fixed (seeded)
/// frequencies and phases.
class FeatureMap {
 public:
  enum class Kind { Polynomial, RandomFourier };

  FeatureMap() = default;

  static FeatureMap polynomial(Index input_dim, int degree);
  /// Frequencies drawn N(0, 1/bandwidth_j^2) per dimension, phases U[0, 2pi).
  static FeatureMap randomFourier(Index input_dim, int count, const Vector& bandwidth,
                                  std::uint64_t seed);

  Kind kind() const { return kind_; }
  Index inputDim() const { return input_dim_; }
  Index size() const;
  int degree() const { return degree_; }
  std::uint64_t seed() const { return seed_; }
  const Vector& bandwidth() const { return bandwidth_; }
  const Matrix& frequencies() const { return frequencies_; }
  const Vector& phases() const { return phases_; }
  /// Monomial exponents, one row per feature (polynomial kind only).
  const Eigen::MatrixXi& exponents() const { return exponents_; }

  template <typename Derived>
  Vector operator()(const Eigen::MatrixBase<Derived>& x) const {
    if (x.size() != input_dim_) throw DimensionMismatchError("FeatureMap: input dimension");
    return evalImpl(Vector(x));
  }

  /// Rebuild a map from serialized pieces (model file round trip).
  static FeatureMap fromParts(Kind kind, Index input_dim, int degree, int count,
                              const Vector& bandwidth, const Matrix& frequencies,
                              const Vector& phases, std::uint64_t seed);

 private:
  Vector evalImpl(const Vector& x) const;

  Kind kind_ = Kind::Polynomial;
  Index input_dim_ = 0;
  int degree_ = 1;
  Eigen::MatrixXi exponents_;  // features x input_dim
  int count_ = 0;
  Vector bandwidth_;
  Matrix frequencies_;  // count x input_dim
  Vector phases_;       // count
  std::uint64_t seed_ = 0;
};

Index featureCount(const FeatureMap& map);

}  // namespace hybriddyn::features
