#include "hybriddyn/io.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace hybriddyn::io {

using nlohmann::json;

namespace {

json matrixToJson(const Matrix& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrixFromJson(const json& j, const char* what) {
  if (!j.is_array()) throw ParseError(std::string(what) + ": expected array of rows");
  const Index rows = static_cast<Index>(j.size());
  if (rows == 0) return Matrix(0, 0);
  const Index cols = static_cast<Index>(j[0].size());
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    if (static_cast<Index>(j[i].size()) != cols)
      throw ParseError(std::string(what) + ": ragged rows");
    for (Index c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

json vectorToJson(const Vector& v) {
  json out = json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

Vector vectorFromJson(const json& j, const char* what) {
  if (!j.is_array()) throw ParseError(std::string(what) + ": expected array");
  Vector v(static_cast<Index>(j.size()));
  for (Index i = 0; i < v.size(); ++i) v[i] = j[i].get<double>();
  return v;
}

json featureMapToJson(const features::FeatureMap& map) {
  json out;
  if (map.kind() == features::FeatureMap::Kind::Polynomial) {
    out["kind"] = "polynomial";
    out["input_dim"] = map.inputDim();
    out["degree"] = map.degree();
  } else {
    out["kind"] = "random_fourier";
    out["input_dim"] = map.inputDim();
    out["count"] = map.size();
    out["bandwidth"] = vectorToJson(map.bandwidth());
    out["frequencies"] = matrixToJson(map.frequencies());
    out["phases"] = vectorToJson(map.phases());
    out["seed"] = map.seed();
  }
  return out;
}

features::FeatureMap featureMapFromJson(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "polynomial")
    return features::FeatureMap::polynomial(j.at("input_dim").get<Index>(),
                                            j.at("degree").get<int>());
  if (kind == "random_fourier")
    return features::FeatureMap::fromParts(
        features::FeatureMap::Kind::RandomFourier, j.at("input_dim").get<Index>(), 0,
        j.at("count").get<int>(), vectorFromJson(j.at("bandwidth"), "bandwidth"),
        matrixFromJson(j.at("frequencies"), "frequencies"),
        vectorFromJson(j.at("phases"), "phases"), j.at("seed").get<std::uint64_t>());
  throw ParseError("feature map: unknown kind '" + kind + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

rarhmm::Dataset readDataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset '" + path + "'");
  rarhmm::Dataset data;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("dataset '" + path + "' line " + std::to_string(line_no) + ": " +
                       e.what());
    }
    rarhmm::Trajectory traj;
    traj.id = rec.value("id", "traj-" + std::to_string(line_no));
    traj.env = rec.value("env", "");
    traj.dt = rec.value("dt", 0.0);
    traj.weight = rec.value("weight", 1.0);
    traj.x = matrixFromJson(rec.at("x"), "x");
    if (rec.contains("u") && !rec.at("u").empty())
      traj.u = matrixFromJson(rec.at("u"), "u");
    else
      traj.u = Matrix(traj.x.rows(), 0);
    if (traj.u.cols() > 0 && traj.u.rows() != traj.x.rows())
      throw ParseError("dataset '" + path + "' line " + std::to_string(line_no) +
                       ": trajectory '" + traj.id + "' has mismatched x/u lengths");
    data.push_back(std::move(traj));
  }
  if (data.empty()) throw ParseError("empty dataset '" + path + "'");
  const Index d = data.front().x.cols();
  const Index m = data.front().u.cols();
  for (const auto& traj : data)
    if (traj.x.cols() != d || traj.u.cols() != m)
      throw DimensionMismatchError("dataset '" + path + "': trajectory '" + traj.id +
                                   "' has inconsistent dimensions");
  return data;
}

void writeDataset(const rarhmm::Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write dataset '" + path + "'");
  for (const auto& traj : data) {
    json rec;
    rec["id"] = traj.id;
    rec["env"] = traj.env;
    rec["dt"] = traj.dt;
    rec["weight"] = traj.weight;
    rec["x"] = matrixToJson(traj.x);
    rec["u"] = traj.u.cols() > 0 ? matrixToJson(traj.u) : json::array();
    out << rec.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// Model document
// ---------------------------------------------------------------------------

void writeModel(const rarhmm::ModelParams& model, const expfam::HyperParams& hyper,
                const std::string& path) {
  json doc;
  doc["format_version"] = 1;
  doc["kind"] = "rarhmm";
  doc["k"] = model.k;
  doc["d"] = model.d;
  doc["m"] = model.m;
  doc["closed_loop"] = model.closedLoop();
  doc["phi"] = vectorToJson(model.phi);
  json init = json::array();
  for (const auto& block : model.init)
    init.push_back({{"mu", vectorToJson(block.mu)},
                    {"omega", matrixToJson(block.omega.precision())}});
  doc["init_state"] = std::move(init);
  json dyn = json::array();
  for (const auto& block : model.dynamics)
    dyn.push_back({{"a", matrixToJson(block.a)},
                   {"b", matrixToJson(block.b)},
                   {"c", vectorToJson(block.c)},
                   {"lambda", matrixToJson(block.lambda.precision())}});
  doc["dynamics"] = std::move(dyn);
  if (model.closedLoop()) {
    json ctl = json::array();
    for (const auto& block : model.controller)
      ctl.push_back({{"gain", matrixToJson(block.gain)},
                     {"delta", matrixToJson(block.delta.precision())}});
    doc["controller"] = std::move(ctl);
    doc["controller_features"] = featureMapToJson(model.ctl_features);
  }
  json link;
  link["kind"] = model.link.kind() == rarhmm::LogitLink::Kind::Linear ? "linear" : "mlp";
  link["width"] = model.link.width();
  link["weights"] = vectorToJson(model.link.params());
  link["input_mean"] = vectorToJson(model.link.inputMean());
  link["input_std"] = vectorToJson(model.link.inputStd());
  doc["link"] = std::move(link);

  json h;
  h["tau0"] = vectorToJson(hyper.phi_prior.tau);
  h["kappa0"] = hyper.init_prior.kappa;
  h["psi0"] = matrixToJson(hyper.init_prior.psi);
  h["nu0"] = hyper.init_prior.nu;
  h["r0"] = matrixToJson(hyper.dyn_prior.kcol);
  h["phi0"] = matrixToJson(hyper.dyn_prior.psi);
  h["rho0"] = hyper.dyn_prior.nu;
  if (hyper.has_controller) {
    h["s0"] = matrixToJson(hyper.ctl_prior.kcol);
    h["gamma0"] = matrixToJson(hyper.ctl_prior.psi);
    h["eps0"] = hyper.ctl_prior.nu;
  }
  h["alpha"] = hyper.omega_alpha;
  doc["hyper"] = std::move(h);

  std::ofstream out(path);
  if (!out) throw ParseError("cannot write model '" + path + "'");
  out << doc.dump(2) << "\n";
}

ModelFile readModel(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open model '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ParseError("model '" + path + "': " + e.what());
  }
  if (doc.value("format_version", 0) != 1)
    throw ParseError("model '" + path + "': unsupported format_version");

  ModelFile out;
  rarhmm::ModelParams& model = out.model;
  model.k = doc.at("k").get<int>();
  model.d = doc.at("d").get<Index>();
  model.m = doc.at("m").get<Index>();
  model.phi = vectorFromJson(doc.at("phi"), "phi");
  for (const auto& block : doc.at("init_state")) {
    rarhmm::RegimeInit init;
    init.mu = vectorFromJson(block.at("mu"), "mu");
    init.omega.set(matrixFromJson(block.at("omega"), "omega"));
    model.init.push_back(std::move(init));
  }
  for (const auto& block : doc.at("dynamics")) {
    rarhmm::RegimeDynamics dyn;
    dyn.a = matrixFromJson(block.at("a"), "a");
    dyn.b = matrixFromJson(block.at("b"), "b");
    if (dyn.b.size() == 0) dyn.b = Matrix(model.d, 0);
    dyn.c = vectorFromJson(block.at("c"), "c");
    dyn.lambda.set(matrixFromJson(block.at("lambda"), "lambda"));
    model.dynamics.push_back(std::move(dyn));
  }
  const bool closed = doc.value("closed_loop", false);
  if (closed) {
    for (const auto& block : doc.at("controller")) {
      rarhmm::RegimeController ctl;
      ctl.gain = matrixFromJson(block.at("gain"), "gain");
      ctl.delta.set(matrixFromJson(block.at("delta"), "delta"));
      model.controller.push_back(std::move(ctl));
    }
    model.ctl_features = featureMapFromJson(doc.at("controller_features"));
  }
  const json& link = doc.at("link");
  const auto link_kind = link.at("kind").get<std::string>() == "mlp"
                             ? rarhmm::LogitLink::Kind::Mlp
                             : rarhmm::LogitLink::Kind::Linear;
  Rng dummy(0);
  model.link = rarhmm::LogitLink(link_kind, model.k, model.d, model.m,
                                 link.value("width", 0), 0.0, dummy);
  model.link.setParams(vectorFromJson(link.at("weights"), "link weights"));
  model.link.setStandardization(vectorFromJson(link.at("input_mean"), "input_mean"),
                                vectorFromJson(link.at("input_std"), "input_std"));

  const json& h = doc.at("hyper");
  expfam::HyperParams& hyper = out.hyper;
  hyper.phi_prior.tau = vectorFromJson(h.at("tau0"), "tau0");
  hyper.init_prior.m = Vector::Zero(model.d);
  hyper.init_prior.kappa = h.at("kappa0").get<double>();
  hyper.init_prior.psi = matrixFromJson(h.at("psi0"), "psi0");
  hyper.init_prior.nu = h.at("nu0").get<double>();
  hyper.dyn_prior.m = Matrix::Zero(model.d, model.d + model.m + 1);
  hyper.dyn_prior.kcol = matrixFromJson(h.at("r0"), "r0");
  hyper.dyn_prior.psi = matrixFromJson(h.at("phi0"), "phi0");
  hyper.dyn_prior.nu = h.at("rho0").get<double>();
  hyper.has_controller = closed;
  if (closed) {
    hyper.ctl_prior.m = Matrix::Zero(model.m, model.ctl_features.size());
    hyper.ctl_prior.kcol = matrixFromJson(h.at("s0"), "s0");
    hyper.ctl_prior.psi = matrixFromJson(h.at("gamma0"), "gamma0");
    hyper.ctl_prior.nu = h.at("eps0").get<double>();
  }
  hyper.omega_alpha = h.at("alpha").get<double>();
  return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

void CsvWriter::addRow(const std::vector<double>& row) {
  if (row.size() != header_.size()) throw DimensionMismatchError("CsvWriter: row width");
  rows_.push_back(row);
}

void CsvWriter::write(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write csv '" + path + "'");
  for (std::size_t i = 0; i < header_.size(); ++i)
    out << header_[i] << (i + 1 < header_.size() ? "," : "\n");
  char buf[64];
  for (const auto& row : rows_) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", row[i]);
      out << buf << (i + 1 < row.size() ? "," : "\n");
    }
  }
}

void writeEmDiagnostics(const std::vector<em::IterationRow>& rows, const std::string& path) {
  CsvWriter csv({"iter", "log_posterior", "loglik", "dQ", "gamma_entropy", "seconds"});
  for (const auto& r : rows)
    csv.addRow({static_cast<double>(r.iter), r.log_posterior, r.loglik, r.dq, r.gamma_entropy,
                r.seconds});
  csv.write(path);
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::map<std::string, std::string> readConfigFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config '" + path + "'");
  std::map<std::string, std::string> out;
  std::string line;
  long line_no = 0;
  auto trim = [](std::string s) {
    const auto begin = s.find_first_not_of(" \t\r");
    const auto end = s.find_last_not_of(" \t\r");
    return begin == std::string::npos ? std::string() : s.substr(begin, end - begin + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ParseError("config '" + path + "' line " + std::to_string(line_no) +
                       ": expected key=value");
    out[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return out;
}

}  // namespace hybriddyn::io
