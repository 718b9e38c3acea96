#include "hybriddyn/features.hpp"

#include <cmath>

namespace hybriddyn::features {

namespace {

void appendCompositions(int remaining, Index dim, Eigen::VectorXi& current,
                        std::vector<Eigen::VectorXi>& out) {
  if (dim == current.size() - 1) {
    current[dim] = remaining;
    out.push_back(current);
    return;
  }
  for (int e = remaining; e >= 0; --e) {
    current[dim] = e;
    appendCompositions(remaining - e, dim + 1, current, out);
  }
}

}  // namespace

FeatureMap FeatureMap::polynomial(Index input_dim, int degree) {
  if (input_dim < 1 || degree < 0) throw DomainError("FeatureMap::polynomial: bad arguments");
  FeatureMap map;
  map.kind_ = Kind::Polynomial;
  map.input_dim_ = input_dim;
  map.degree_ = degree;
  std::vector<Eigen::VectorXi> rows;
  Eigen::VectorXi current(input_dim);
  for (int total = 0; total <= degree; ++total) appendCompositions(total, 0, current, rows);
  map.exponents_.resize(static_cast<Index>(rows.size()), input_dim);
  for (Index i = 0; i < map.exponents_.rows(); ++i) map.exponents_.row(i) = rows[i].transpose();
  return map;
}

FeatureMap FeatureMap::randomFourier(Index input_dim, int count, const Vector& bandwidth,
                                     std::uint64_t seed) {
  if (input_dim < 1 || count < 1) throw DomainError("FeatureMap::randomFourier: bad arguments");
  if (bandwidth.size() != input_dim || bandwidth.minCoeff() <= 0.0)
    throw DomainError("FeatureMap::randomFourier: bandwidth must be positive per dimension");
  FeatureMap map;
  map.kind_ = Kind::RandomFourier;
  map.input_dim_ = input_dim;
  map.count_ = count;
  map.bandwidth_ = bandwidth;
  map.seed_ = seed;
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 2.0 * M_PI);
  map.frequencies_.resize(count, input_dim);
  for (Index f = 0; f < count; ++f)
    for (Index j = 0; j < input_dim; ++j) map.frequencies_(f, j) = gauss(rng) / bandwidth[j];
  map.phases_.resize(count);
  for (Index f = 0; f < count; ++f) map.phases_[f] = unif(rng);
  return map;
}

FeatureMap FeatureMap::fromParts(Kind kind, Index input_dim, int degree, int count,
                                 const Vector& bandwidth, const Matrix& frequencies,
                                 const Vector& phases, std::uint64_t seed) {
  if (kind == Kind::Polynomial) return polynomial(input_dim, degree);
  FeatureMap map;
  map.kind_ = Kind::RandomFourier;
  map.input_dim_ = input_dim;
  map.count_ = count;
  map.bandwidth_ = bandwidth;
  map.frequencies_ = frequencies;
  map.phases_ = phases;
  map.seed_ = seed;
  if (map.frequencies_.rows() != count || map.frequencies_.cols() != input_dim ||
      map.phases_.size() != count)
    throw DimensionMismatchError("FeatureMap::fromParts: inconsistent fourier pieces");
  return map;
}

Index FeatureMap::size() const {
  return kind_ == Kind::Polynomial ? exponents_.rows() : static_cast<Index>(count_);
}

Vector FeatureMap::evalImpl(const Vector& x) const {
  if (kind_ == Kind::Polynomial) {
    // power table per dimension, then monomial products
    Matrix powers(input_dim_, degree_ + 1);
    for (Index j = 0; j < input_dim_; ++j) {
      powers(j, 0) = 1.0;
      for (int e = 1; e <= degree_; ++e) powers(j, e) = powers(j, e - 1) * x[j];
    }
    Vector out(exponents_.rows());
    for (Index i = 0; i < exponents_.rows(); ++i) {
      double v = 1.0;
      for (Index j = 0; j < input_dim_; ++j) v *= powers(j, exponents_(i, j));
      out[i] = v;
    }
    return out;
  }
  return ((frequencies_ * x + phases_).array()).cos();
}

Index featureCount(const FeatureMap& map) { return map.size(); }

}  // namespace hybriddyn::features
