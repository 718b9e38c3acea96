#pragma once

#include <map>
#include <string>
#include <vector>

#include "hybriddyn/em.hpp"
#include "hybriddyn/rarhmm.hpp"

namespace hybriddyn::io {

/// JSON-lines dataset: one trajectory record per line with fields
/// {id, env, dt, weight, x, u}. Numeric round trips are lossless.
rarhmm::Dataset readDataset(const std::string& path);
void writeDataset(const rarhmm::Dataset& data, const std::string& path);

/// Self-describing versioned model document (single JSON file) holding dims,
/// all parameter blocks row-major, the feature-map descriptors, link weights,
/// and the hyperparameter set.
void writeModel(const rarhmm::ModelParams& model, const expfam::HyperParams& hyper,
                const std::string& path);

struct ModelFile {
  rarhmm::ModelParams model;
  expfam::HyperParams hyper;
};

ModelFile readModel(const std::string& path);

/// CSV with header and full-precision decimals, rows in insertion order.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {}
  void addRow(const std::vector<double>& row);
  void write(const std::string& path) const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<double>> rows_;
};

void writeEmDiagnostics(const std::vector<em::IterationRow>& rows, const std::string& path);

/// Flat key=value configuration file (# comments, blank lines ignored).
std::map<std::string, std::string> readConfigFile(const std::string& path);

}  // namespace hybriddyn::io
