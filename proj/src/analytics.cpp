// SPDX-License-Identifier: Apache-2.0

#include "moekit/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "moekit/tensor.hpp"

namespace moekit {

namespace {

void check_trace(const RoutingTrace& trace) {
  for (const LayerTrace& layer : trace.layers) {
    if (layer.num_experts == 0) throw ShapeError("trace: layer without experts");
    if (layer.probs.size() % layer.num_experts != 0)
      throw ShapeError("trace: ragged probability matrix");
    if (layer.modality.size() != layer.tokens())
      throw ShapeError("trace: modality tags must cover every token");
  }
}

}  // namespace

std::vector<std::vector<double>> expert_load_distribution(const RoutingTrace& trace) {
  check_trace(trace);
  std::vector<std::vector<double>> loads;
  loads.reserve(trace.layers.size());
  for (const LayerTrace& layer : trace.layers) {
    std::vector<std::size_t> counts(layer.num_experts, 0);
    const std::size_t tokens = layer.tokens();
    for (std::size_t t = 0; t < tokens; ++t) ++counts[layer.selected[t * layer.top_k]];
    std::vector<double> frac(layer.num_experts);
    for (std::size_t e = 0; e < layer.num_experts; ++e)
      frac[e] = static_cast<double>(counts[e]) / static_cast<double>(tokens);
    loads.push_back(std::move(frac));
  }
  return loads;
}

std::vector<std::vector<ModalityShare>> modality_preference(const RoutingTrace& trace) {
  check_trace(trace);
  std::vector<std::vector<ModalityShare>> out;
  out.reserve(trace.layers.size());
  for (const LayerTrace& layer : trace.layers) {
    std::vector<std::size_t> text(layer.num_experts, 0), image(layer.num_experts, 0);
    const std::size_t tokens = layer.tokens();
    for (std::size_t t = 0; t < tokens; ++t) {
      const std::size_t e = layer.selected[t * layer.top_k];
      if (layer.modality[t] == Modality::kText)
        ++text[e];
      else
        ++image[e];
    }
    std::vector<ModalityShare> shares(layer.num_experts);
    for (std::size_t e = 0; e < layer.num_experts; ++e) {
      const std::size_t n = text[e] + image[e];
      if (n == 0) continue;
      shares[e].active = true;
      shares[e].text_fraction = static_cast<double>(text[e]) / static_cast<double>(n);
      shares[e].image_fraction = static_cast<double>(image[e]) / static_cast<double>(n);
    }
    out.push_back(std::move(shares));
  }
  return out;
}

namespace {

// Cyclic Jacobi sweeps on a symmetric matrix; returns eigenvalues (diagonal)
// and accumulates rotations into v (column j of v is eigenvector j).
void jacobi_eigen(std::vector<double>& a, std::size_t n, std::vector<double>& v) {
  v.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  constexpr int kMaxSweeps = 64;
  constexpr double kTol = 1e-14;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (off <= kTol) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t i = 0; i < n; ++i) {
          const double aip = a[i * n + p], aiq = a[i * n + q];
          a[i * n + p] = c * aip - s * aiq;
          a[i * n + q] = s * aip + c * aiq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double api = a[p * n + i], aqi = a[q * n + i];
          a[p * n + i] = c * api - s * aqi;
          a[q * n + i] = s * api + c * aqi;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vip = v[i * n + p], viq = v[i * n + q];
          v[i * n + p] = c * vip - s * viq;
          v[i * n + q] = s * vip + c * viq;
        }
      }
    }
  }
}

}  // namespace

PcaResult first_principal_component(const std::vector<double>& data, std::size_t rows,
                                    std::size_t cols) {
  if (rows < 2) throw ShapeError("pca: needs at least 2 rows");
  if (cols == 0 || data.size() != rows * cols) throw ShapeError("pca: bad data matrix");
  std::vector<double> mean(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) mean[c] += data[r * cols + c];
  for (double& m : mean) m /= static_cast<double>(rows);
  std::vector<double> cov(cols * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < cols; ++i) {
      const double di = data[r * cols + i] - mean[i];
      for (std::size_t j = i; j < cols; ++j)
        cov[i * cols + j] += di * (data[r * cols + j] - mean[j]);
    }
  for (std::size_t i = 0; i < cols; ++i)
    for (std::size_t j = i; j < cols; ++j) {
      cov[i * cols + j] /= static_cast<double>(rows - 1);
      cov[j * cols + i] = cov[i * cols + j];
    }
  std::vector<double> vecs;
  jacobi_eigen(cov, cols, vecs);
  std::size_t best = 0;
  for (std::size_t j = 1; j < cols; ++j)
    if (cov[j * cols + j] > cov[best * cols + best]) best = j;
  PcaResult res;
  res.eigenvalue = cov[best * cols + best];
  res.component.resize(cols);
  for (std::size_t i = 0; i < cols; ++i) res.component[i] = vecs[i * cols + best];
  // canonical sign: first nonzero component positive
  for (double c : res.component) {
    if (c != 0.0) {
      if (c < 0.0)
        for (double& x : res.component) x = -x;
      break;
    }
  }
  return res;
}

PathwayReport token_pathways(const RoutingTrace& trace, std::size_t n) {
  check_trace(trace);
  if (trace.layers.empty()) throw ShapeError("token_pathways: empty trace");
  const std::size_t tokens = trace.layers.front().tokens();
  for (const LayerTrace& layer : trace.layers)
    if (layer.tokens() != tokens)
      throw ShapeError("token_pathways: layers disagree on token count");
  if (tokens < 2) throw ShapeError("token_pathways: needs at least 2 tokens");

  std::size_t fdim = 0;
  for (const LayerTrace& layer : trace.layers) fdim += layer.num_experts;
  std::vector<double> features(tokens * fdim);
  for (std::size_t t = 0; t < tokens; ++t) {
    std::size_t off = 0;
    for (const LayerTrace& layer : trace.layers) {
      for (std::size_t e = 0; e < layer.num_experts; ++e)
        features[t * fdim + off + e] = layer.prob(t, e);
      off += layer.num_experts;
    }
  }
  PcaResult pca = first_principal_component(features, tokens, fdim);

  std::vector<double> mean(fdim, 0.0);
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t c = 0; c < fdim; ++c) mean[c] += features[t * fdim + c];
  for (double& m : mean) m /= static_cast<double>(tokens);
  std::vector<double> score(tokens, 0.0);
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t c = 0; c < fdim; ++c)
      score[t] += (features[t * fdim + c] - mean[c]) * pca.component[c];

  std::vector<std::size_t> order(tokens);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = std::abs(score[a]), sb = std::abs(score[b]);
    if (sa != sb) return sa > sb;
    return a < b;
  });

  PathwayReport report;
  std::map<std::vector<std::size_t>, std::size_t> seen;  // pathway -> entry index
  const std::size_t take = std::min(n, tokens);
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t t = order[i];
    std::vector<std::size_t> path;
    path.reserve(trace.layers.size());
    for (const LayerTrace& layer : trace.layers) path.push_back(layer.selected[t * layer.top_k]);
    if (seen.count(path)) continue;
    seen[path] = report.pathways.size();
    PathwayEntry entry;
    entry.experts = std::move(path);
    entry.score = std::abs(score[t]);
    entry.modality = trace.layers.front().modality[t];
    report.pathways.push_back(std::move(entry));
  }
  // per-modality top-2 highlight
  std::size_t text_rank = 0, image_rank = 0;
  for (PathwayEntry& e : report.pathways) {
    if (e.modality == Modality::kText) {
      e.top2 = text_rank++ < 2;
    } else {
      e.top2 = image_rank++ < 2;
    }
  }
  return report;
}

// --- report files ------------------------------------------------------------

namespace {

std::string format_fraction(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ShapeError("report: cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) lines.push_back(line);
  return lines;
}

}  // namespace

void write_loads_csv(const RoutingTrace& trace, const std::string& path) {
  const auto loads = expert_load_distribution(trace);
  std::ofstream os(path);
  if (!os) throw ShapeError("report: cannot write '" + path + "'");
  os << "layer,expert,fraction\n";
  for (std::size_t l = 0; l < loads.size(); ++l)
    for (std::size_t e = 0; e < loads[l].size(); ++e)
      os << l << "," << e << "," << format_fraction(loads[l][e]) << "\n";
  os.close();
  validate_loads_csv(path);
}

void write_preferences_csv(const RoutingTrace& trace, const std::string& path) {
  const auto prefs = modality_preference(trace);
  std::ofstream os(path);
  if (!os) throw ShapeError("report: cannot write '" + path + "'");
  os << "layer,expert,text_fraction,image_fraction\n";
  for (std::size_t l = 0; l < prefs.size(); ++l)
    for (std::size_t e = 0; e < prefs[l].size(); ++e) {
      os << l << "," << e << ",";
      if (prefs[l][e].active)
        os << format_fraction(prefs[l][e].text_fraction) << ","
           << format_fraction(prefs[l][e].image_fraction);
      else
        os << ",";
      os << "\n";
    }
  os.close();
  validate_preferences_csv(path);
}

void write_pathways_json(const PathwayReport& report, const std::string& path) {
  nlohmann::json j;
  j["pathways"] = nlohmann::json::array();
  for (const PathwayEntry& e : report.pathways) {
    nlohmann::json p;
    p["experts"] = e.experts;
    p["score"] = e.score;
    p["modality"] = e.modality == Modality::kText ? "text" : "image";
    p["top2"] = e.top2;
    j["pathways"].push_back(std::move(p));
  }
  std::ofstream os(path);
  if (!os) throw ShapeError("report: cannot write '" + path + "'");
  os << j.dump(2) << "\n";
  os.close();
  validate_pathways_json(path);
}

void validate_loads_csv(const std::string& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines.front() != "layer,expert,fraction")
    throw ShapeError("loads csv: bad header");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split_csv_line(lines[i]);
    if (f.size() != 3) throw ShapeError("loads csv: bad field count");
    (void)std::stoul(f[0]);
    (void)std::stoul(f[1]);
    const double v = std::stod(f[2]);
    if (v < 0.0 || v > 1.0) throw ShapeError("loads csv: fraction out of [0,1]");
  }
}

void validate_preferences_csv(const std::string& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines.front() != "layer,expert,text_fraction,image_fraction")
    throw ShapeError("preferences csv: bad header");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split_csv_line(lines[i]);
    if (f.size() != 4) throw ShapeError("preferences csv: bad field count");
    (void)std::stoul(f[0]);
    (void)std::stoul(f[1]);
    const bool blank_text = f[2].empty(), blank_image = f[3].empty();
    if (blank_text != blank_image)
      throw ShapeError("preferences csv: half-blank modality row");
    if (!blank_text) {
      const double tv = std::stod(f[2]), iv = std::stod(f[3]);
      if (tv < 0.0 || tv > 1.0 || iv < 0.0 || iv > 1.0 || std::abs(tv + iv - 1.0) > 1e-9)
        throw ShapeError("preferences csv: fractions must be in [0,1] and sum to 1");
    }
  }
}

void validate_pathways_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ShapeError("pathways json: cannot open '" + path + "'");
  nlohmann::json j;
  is >> j;
  if (!j.is_object() || !j.contains("pathways") || !j["pathways"].is_array())
    throw ShapeError("pathways json: missing pathways array");
  double prev = std::numeric_limits<double>::infinity();
  for (const auto& p : j["pathways"]) {
    if (!p.contains("experts") || !p["experts"].is_array() || !p.contains("score") ||
        !p.contains("modality") || !p.contains("top2"))
      throw ShapeError("pathways json: malformed entry");
    const std::string m = p["modality"].get<std::string>();
    if (m != "text" && m != "image") throw ShapeError("pathways json: bad modality");
    const double s = p["score"].get<double>();
    if (s > prev + 1e-12) throw ShapeError("pathways json: scores must be descending");
    prev = s;
  }
}

}  // namespace moekit
