#include "civbalance/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "civbalance/errors.hpp"
#include "civbalance/rng.hpp"

namespace civb {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double sigmoid_clamped(double x) {
  const double p = 1.0 / (1.0 + std::exp(-x));
  return std::clamp(p, kMinAssignProb, 1.0 - kMinAssignProb);
}

double row_sum(const Matrix& m, std::size_t r) {
  if (m.cols() == 0) return 0.0;
  const auto row = m.row(r);
  return std::accumulate(row.begin(), row.end(), 0.0);
}

void check_rows(const Matrix& c, const Matrix& u, std::size_t n, const char* what) {
  if (c.rows() != n || (u.cols() > 0 && u.rows() != n)) {
    throw ShapeError(std::string(what) + ": C is " + c.shape_str() + ", U is " + u.shape_str() + ", expected " +
                     std::to_string(n) + " rows");
  }
}

std::vector<double> draw_binary(std::span<const double> prob, std::uint64_t seed, Stream stream) {
  Rng rng = make_rng(seed, stream);
  std::vector<double> out(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) out[i] = bernoulli(rng, prob[i]) ? 1.0 : 0.0;
  return out;
}

double mean_effect(const std::vector<double>& y1, const std::vector<double>& y0) {
  double s = 0.0;
  for (std::size_t i = 0; i < y1.size(); ++i) s += y1[i] - y0[i];
  return y1.empty() ? 0.0 : s / static_cast<double>(y1.size());
}

CivDataset assemble(Matrix c, Matrix u, std::uint64_t seed, double noise_sd) {
  CivDataset d;
  d.s = gen_instrument(c, u, seed);
  d.w = gen_treatment(d.s, c, u, seed);
  Outcomes o = gen_outcome(d.w, c, u, noise_sd, seed);
  d.y = std::move(o.y);
  GroundTruth t;
  t.true_ace = mean_effect(o.y1, o.y0);
  t.y1 = std::move(o.y1);
  t.y0 = std::move(o.y0);
  t.u = std::move(u);
  d.c = std::move(c);
  d.truth = std::move(t);
  return d;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    cells.push_back(trim(std::string_view(line).substr(start, pos == std::string::npos ? std::string::npos : pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return cells;
}

bool parse_double(const std::string& cell, double& out) {
  if (cell.empty()) return false;
  const char* first = cell.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, cell.data() + cell.size(), out);
  return ec == std::errc() && ptr == cell.data() + cell.size() && std::isfinite(out);
}

std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  return out;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> columns;
};

Table read_numeric_csv(const fs::path& path) {
  CovariateTable t = read_covariate_table(path.string());
  Table out;
  out.header = t.names;
  for (std::size_t j = 0; j < t.values.cols(); ++j) out.columns.push_back(t.values.col_values(j));
  return out;
}

std::size_t column_index(const Table& t, const std::string& name, const std::string& path) {
  const auto it = std::find(t.header.begin(), t.header.end(), name);
  if (it == t.header.end()) throw IoError(path, "missing column '" + name + "'");
  return static_cast<std::size_t>(it - t.header.begin());
}

Matrix gather_columns(const Table& t, std::span<const std::size_t> idx, std::size_t n) {
  Matrix m(n, idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    for (std::size_t i = 0; i < n; ++i) m(i, j) = t.columns[idx[j]][i];
  }
  return m;
}

}  // namespace

void SynSpec::validate() const {
  if (p < 1) throw ConfigError("SynSpec: p must be at least 1");
  if (n < 2) throw ConfigError("SynSpec: n must be at least 2");
  if (!(noise_sd >= 0.0) || !std::isfinite(noise_sd)) throw ConfigError("SynSpec: noise_sd must be finite and >= 0");
}

std::string SynSpec::name() const { return "Syn-" + std::to_string(p) + "-" + std::to_string(q); }

void SemiSynSpec::validate() const {
  if (covariate_table_path.empty()) throw ConfigError("SemiSynSpec: covariate_table_path is empty");
  if (p < 1) throw ConfigError("SemiSynSpec: p must be at least 1");
  if (!(noise_sd >= 0.0) || !std::isfinite(noise_sd)) throw ConfigError("SemiSynSpec: noise_sd must be finite and >= 0");
}

std::string SemiSynSpec::name(const std::string& prefix) const {
  return prefix + "-" + std::to_string(p) + "-" + std::to_string(q);
}

Matrix make_covariance(std::size_t d) {
  if (d < 1) throw ArgumentError("make_covariance: d must be at least 1");
  Matrix m(d, d, 0.05);
  for (std::size_t i = 0; i < d; ++i) m(i, i) = 1.0;
  return m;
}

Confounders sample_confounders(const SynSpec& spec) {
  spec.validate();
  const std::size_t d = spec.p + spec.q;
  const Matrix l = cholesky(make_covariance(d));
  Rng rng = make_rng(spec.seed, Stream::confounders);
  Confounders out{Matrix(spec.n, spec.p), Matrix(spec.n, spec.q)};
  std::vector<double> z(d);
  for (std::size_t i = 0; i < spec.n; ++i) {
    for (auto& v : z) v = standard_normal(rng);
    for (std::size_t r = 0; r < d; ++r) {
      double x = 0.0;
      for (std::size_t k = 0; k <= r; ++k) x += l(r, k) * z[k];
      if (r < spec.p) {
        out.c(i, r) = x;
      } else {
        out.u(i, r - spec.p) = x;
      }
    }
  }
  return out;
}

std::vector<double> instrument_prob(const Matrix& c, const Matrix& u) {
  check_rows(c, u, c.rows(), "instrument_prob");
  std::vector<double> p(c.rows());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = sigmoid_clamped(row_sum(c, i) + row_sum(u, i));
  return p;
}

std::vector<double> treatment_prob(std::span<const double> s, const Matrix& c, const Matrix& u) {
  check_rows(c, u, s.size(), "treatment_prob");
  std::vector<double> p(s.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double sc = row_sum(c, i);
    p[i] = sigmoid_clamped(s[i] * sc + sc + row_sum(u, i));
  }
  return p;
}

std::vector<double> gen_instrument(const Matrix& c, const Matrix& u, std::uint64_t seed) {
  return draw_binary(instrument_prob(c, u), seed, Stream::instrument);
}

std::vector<double> gen_treatment(std::span<const double> s, const Matrix& c, const Matrix& u, std::uint64_t seed) {
  return draw_binary(treatment_prob(s, c, u), seed, Stream::treatment);
}

Outcomes gen_outcome(std::span<const double> w, const Matrix& c, const Matrix& u, double noise_sd,
                     std::uint64_t seed) {
  check_rows(c, u, w.size(), "gen_outcome");
  if (!(noise_sd >= 0.0)) throw ArgumentError("gen_outcome: noise_sd must be >= 0");
  const double d = static_cast<double>(c.cols() + u.cols());
  Rng rng = make_rng(seed, Stream::noise);
  Outcomes o{std::vector<double>(w.size()), std::vector<double>(w.size()), std::vector<double>(w.size())};
  for (std::size_t i = 0; i < w.size(); ++i) {
    double sq = 0.0;
    for (double x : c.row(i)) sq += x * x;
    for (std::size_t j = 0; j < u.cols(); ++j) sq += u(i, j) * u(i, j);
    o.y1[i] = sq / d;
    o.y0[i] = (row_sum(c, i) + row_sum(u, i)) / d;
    o.y[i] = w[i] * o.y1[i] + (1.0 - w[i]) * o.y0[i];
    if (noise_sd > 0.0) o.y[i] += noise_sd * standard_normal(rng);
  }
  return o;
}

CivDataset generate_synthetic(const SynSpec& spec) {
  Confounders cu = sample_confounders(spec);
  return assemble(std::move(cu.c), std::move(cu.u), spec.seed, spec.noise_sd);
}

CovariateTable read_covariate_table(const std::string& path, std::span<const std::string> drop_columns) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open covariate table");
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw IngestionError(1, 1, "empty table, expected a header row");
  const char delim = line.find('\t') != std::string::npos ? '\t' : ',';
  const auto header = split_line(line, delim);
  std::vector<bool> keep(header.size());
  CovariateTable t;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (header[j].empty()) throw IngestionError(1, j + 1, "empty column name");
    keep[j] = std::find(drop_columns.begin(), drop_columns.end(), header[j]) == drop_columns.end();
    if (keep[j]) t.names.push_back(header[j]);
  }
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_line(line, delim);
    if (cells.size() != header.size()) {
      throw IngestionError(line_no, std::min(cells.size(), header.size()) + 1,
                           "expected " + std::to_string(header.size()) + " cells, found " +
                               std::to_string(cells.size()));
    }
    for (std::size_t j = 0; j < cells.size(); ++j) {
      if (!keep[j]) continue;
      double v = 0.0;
      if (!parse_double(cells[j], v)) {
        throw IngestionError(line_no, j + 1, "column '" + header[j] + "' has non-numeric cell '" + cells[j] + "'");
      }
      values.push_back(v);
    }
    ++rows;
  }
  t.values = Matrix(rows, t.names.size(), std::move(values));
  return t;
}

SemiSynthetic build_semi_synthetic(const SemiSynSpec& spec) {
  spec.validate();
  const CovariateTable table = read_covariate_table(spec.covariate_table_path, spec.drop_columns);
  return build_semi_synthetic(spec, table);
}

SemiSynthetic build_semi_synthetic(const SemiSynSpec& spec, const CovariateTable& table) {
  if (spec.p < 1) throw ConfigError("SemiSynSpec: p must be at least 1");
  const std::size_t k = spec.p + spec.q;
  if (k > table.names.size()) {
    throw ConfigError("covariate table has " + std::to_string(table.names.size()) + " usable columns, " +
                      std::to_string(k) + " requested");
  }
  const std::size_t n = table.values.rows();
  if (n < 2) throw ConfigError("covariate table needs at least 2 rows");

  // Partial Fisher-Yates: the first k slots are a uniform ordered sample.
  std::vector<std::size_t> order(table.names.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(spec.seed, Stream::selection);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }

  SemiSynthetic out;
  out.source_rows = n;
  Matrix c(n, spec.p);
  Matrix u(n, spec.q);
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t col = order[j];
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += table.values(i, col);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (table.values(i, col) - mean) * (table.values(i, col) - mean);
    var /= static_cast<double>(n);
    if (!(var > 0.0)) throw ConfigError("selected covariate '" + table.names[col] + "' is constant");
    const double sd = std::sqrt(var);
    Matrix& dst = j < spec.p ? c : u;
    const std::size_t dj = j < spec.p ? j : j - spec.p;
    for (std::size_t i = 0; i < n; ++i) dst(i, dj) = (table.values(i, col) - mean) / sd;
    (j < spec.p ? out.observed_columns : out.hidden_columns).push_back(table.names[col]);
  }
  out.data = assemble(std::move(c), std::move(u), spec.seed, spec.noise_sd);
  return out;
}

DatasetManifest manifest_for(const SynSpec& spec, const CivDataset& data) {
  DatasetManifest m;
  m.kind = "synthetic";
  m.name = spec.name();
  m.p = spec.p;
  m.q = spec.q;
  m.n = data.size();
  m.seed = spec.seed;
  m.noise_sd = spec.noise_sd;
  m.source_rows = data.size();
  m.true_ace = data.truth ? data.truth->true_ace : 0.0;
  return m;
}

DatasetManifest manifest_for(const SemiSynSpec& spec, const SemiSynthetic& semi) {
  DatasetManifest m;
  m.kind = "semi_synthetic";
  m.name = spec.name();
  m.p = spec.p;
  m.q = spec.q;
  m.n = semi.data.size();
  m.seed = spec.seed;
  m.noise_sd = spec.noise_sd;
  m.selected_columns = semi.observed_columns;
  m.selected_columns.insert(m.selected_columns.end(), semi.hidden_columns.begin(), semi.hidden_columns.end());
  m.covariate_source = spec.covariate_table_path;
  m.source_rows = semi.source_rows;
  m.true_ace = semi.data.truth ? semi.data.truth->true_ace : 0.0;
  m.notes.push_back(
      "outcome surface: the synthetic surface (sum of squares vs sum, divided by p+q) evaluated on the selected "
      "standardized columns, so that the true ACE is known");
  return m;
}

std::string write_dataset(const CivDataset& data, DatasetManifest manifest, const std::string& dir,
                          const std::string& stem) {
  data.validate();
  const fs::path base(dir);
  if (!fs::is_directory(base)) throw IoError(dir, "output directory does not exist");
  manifest.data_file = stem + ".csv";
  manifest.truth_file = data.truth ? stem + ".truth.csv" : "";
  manifest.n = data.size();

  {
    auto out = open_out(base / manifest.data_file);
    for (std::size_t j = 0; j < data.dim(); ++j) out << "C_" << j + 1 << ',';
    out << "S,W,Y\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
      for (double v : data.c.row(i)) out << format_double(v) << ',';
      out << format_double(data.s[i]) << ',' << format_double(data.w[i]) << ',' << format_double(data.y[i]) << '\n';
    }
    if (!out) throw IoError((base / manifest.data_file).string(), "write failed");
  }
  if (data.truth) {
    const GroundTruth& t = *data.truth;
    auto out = open_out(base / manifest.truth_file);
    out << "Y1,Y0";
    for (std::size_t j = 0; j < t.u.cols(); ++j) out << ",U_" << j + 1;
    out << '\n';
    for (std::size_t i = 0; i < data.size(); ++i) {
      out << format_double(t.y1[i]) << ',' << format_double(t.y0[i]);
      for (std::size_t j = 0; j < t.u.cols(); ++j) out << ',' << format_double(t.u(i, j));
      out << '\n';
    }
    if (!out) throw IoError((base / manifest.truth_file).string(), "write failed");
  }

  json j = {{"kind", manifest.kind},
            {"name", manifest.name},
            {"p", manifest.p},
            {"q", manifest.q},
            {"n", manifest.n},
            {"seed", manifest.seed},
            {"noise_sd", manifest.noise_sd},
            {"substreams",
             {{"confounders", static_cast<std::uint64_t>(Stream::confounders)},
              {"instrument", static_cast<std::uint64_t>(Stream::instrument)},
              {"treatment", static_cast<std::uint64_t>(Stream::treatment)},
              {"noise", static_cast<std::uint64_t>(Stream::noise)},
              {"selection", static_cast<std::uint64_t>(Stream::selection)}}},
            {"selected_columns", manifest.selected_columns},
            {"covariate_source", manifest.covariate_source},
            {"source_rows", manifest.source_rows},
            {"true_ace", manifest.true_ace},
            {"data_file", manifest.data_file},
            {"truth_file", manifest.truth_file},
            {"notes", manifest.notes}};
  const fs::path manifest_path = base / (stem + ".json");
  auto out = open_out(manifest_path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError(manifest_path.string(), "write failed");
  return manifest_path.string();
}

LoadedDataset read_dataset(const std::string& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw IoError(manifest_path, "cannot open manifest");
  LoadedDataset out;
  DatasetManifest& m = out.manifest;
  try {
    const json j = json::parse(in);
    m.kind = j.at("kind").get<std::string>();
    m.name = j.at("name").get<std::string>();
    m.p = j.at("p").get<std::size_t>();
    m.q = j.at("q").get<std::size_t>();
    m.n = j.at("n").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.noise_sd = j.at("noise_sd").get<double>();
    m.selected_columns = j.at("selected_columns").get<std::vector<std::string>>();
    m.covariate_source = j.at("covariate_source").get<std::string>();
    m.source_rows = j.at("source_rows").get<std::size_t>();
    m.true_ace = j.at("true_ace").get<double>();
    m.data_file = j.at("data_file").get<std::string>();
    m.truth_file = j.at("truth_file").get<std::string>();
    m.notes = j.at("notes").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw IoError(manifest_path, std::string("malformed manifest (") + e.what() + ")");
  }

  const fs::path base = fs::path(manifest_path).parent_path();
  const fs::path data_path = base / m.data_file;
  const Table t = read_numeric_csv(data_path);
  const std::size_t n = t.columns.empty() ? 0 : t.columns[0].size();
  std::vector<std::size_t> cidx;
  for (std::size_t j = 0; j < m.p; ++j) cidx.push_back(column_index(t, "C_" + std::to_string(j + 1), data_path));
  CivDataset& d = out.data;
  d.c = gather_columns(t, cidx, n);
  d.s = t.columns[column_index(t, "S", data_path)];
  d.w = t.columns[column_index(t, "W", data_path)];
  d.y = t.columns[column_index(t, "Y", data_path)];

  if (!m.truth_file.empty() && fs::exists(base / m.truth_file)) {
    const fs::path truth_path = base / m.truth_file;
    const Table tt = read_numeric_csv(truth_path);
    GroundTruth g;
    g.y1 = tt.columns[column_index(tt, "Y1", truth_path)];
    g.y0 = tt.columns[column_index(tt, "Y0", truth_path)];
    std::vector<std::size_t> uidx;
    for (std::size_t j = 0; j < m.q; ++j) uidx.push_back(column_index(tt, "U_" + std::to_string(j + 1), truth_path));
    g.u = gather_columns(tt, uidx, g.y1.size());
    g.true_ace = mean_effect(g.y1, g.y0);
    d.truth = std::move(g);
  }
  d.validate();
  return out;
}

}  // namespace civb
