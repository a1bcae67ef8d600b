#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <unistd.h>

#include "civbalance/datagen.hpp"
#include "civbalance/errors.hpp"
#include "civbalance/rng.hpp"
#include "doctest.h"

using namespace civb;
namespace fs = std::filesystem;

namespace {

double mean_of(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

// Joint column j of [C | U].
double cu(const Confounders& x, std::size_t i, std::size_t j) {
  return j < x.c.cols() ? x.c(i, j) : x.u(i, j - x.c.cols());
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("civb_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

// IHDP-like table: an id column, 6 continuous and 18 binary covariates.
std::string ihdp_like_table(std::size_t rows) {
  Rng rng(77);
  std::string t = "id";
  for (int j = 1; j <= 24; ++j) t += ",x" + std::to_string(j);
  t += "\n";
  for (std::size_t i = 0; i < rows; ++i) {
    t += std::to_string(i + 1);
    for (int j = 1; j <= 24; ++j) {
      const double v = j <= 6 ? 3.0 * standard_normal(rng) + 10.0 * j : (bernoulli(rng, 0.1 + 0.03 * j) ? 1.0 : 0.0);
      t += "," + std::to_string(v);
    }
    t += "\n";
  }
  return t;
}

}  // namespace

TEST_CASE("make_covariance") {
  const Matrix two = make_covariance(2);
  CHECK(two == Matrix{{1.0, 0.05}, {0.05, 1.0}});
  CHECK(make_covariance(1) == Matrix{{1.0}});
  for (std::size_t d : {3, 8, 17, 64}) {
    const Matrix s = make_covariance(d);
    const Matrix l = cholesky(s);
    const Matrix back = matmul_nt(l, l);
    double worst = 0.0;
    for (std::size_t k = 0; k < s.size(); ++k) worst = std::max(worst, std::abs(back[k] - s[k]));
    CHECK(worst < 1e-12);
  }
  CHECK_THROWS_AS(make_covariance(0), ArgumentError);
}

TEST_CASE("sample_confounders") {
  SynSpec spec{4, 4, 50000, 11};
  const Confounders x = sample_confounders(spec);
  REQUIRE(x.c.rows() == 50000);
  REQUIRE(x.c.cols() == 4);
  REQUIRE(x.u.cols() == 4);
  const double n = 50000.0;
  std::vector<double> mean(8, 0.0);
  for (std::size_t i = 0; i < spec.n; ++i)
    for (std::size_t j = 0; j < 8; ++j) mean[j] += cu(x, i, j) / n;
  for (std::size_t a = 0; a < 8; ++a) {
    CHECK(std::abs(mean[a]) < 0.02);
    for (std::size_t b = a; b < 8; ++b) {
      double cov = 0.0;
      for (std::size_t i = 0; i < spec.n; ++i) cov += (cu(x, i, a) - mean[a]) * (cu(x, i, b) - mean[b]);
      cov /= n;
      if (a == b) {
        CHECK(std::abs(cov - 1.0) < 0.03);
      } else {
        CHECK(std::abs(cov - 0.05) < 0.02);
      }
    }
  }
  SUBCASE("pure function of SynSpec") {
    SynSpec small{2, 1, 30, 5};
    const Confounders a = sample_confounders(small);
    const Confounders b = sample_confounders(small);
    CHECK(a.c == b.c);
    CHECK(a.u == b.u);
    small.seed = 6;
    CHECK_FALSE(sample_confounders(small).c == a.c);
  }
  SUBCASE("SynSpec validation") {
    CHECK_THROWS_AS(sample_confounders(SynSpec{0, 1, 10, 0}), ConfigError);
    CHECK_THROWS_AS(sample_confounders(SynSpec{1, 0, 1, 0}), ConfigError);
    CHECK_NOTHROW(sample_confounders(SynSpec{1, 0, 2, 0}));
  }
}

TEST_CASE("gen_instrument") {
  const Matrix zero_c(1, 2, 0.0);
  const Matrix zero_u(1, 2, 0.0);
  CHECK(instrument_prob(zero_c, zero_u)[0] == 0.5);
  const Matrix big{{4.0, 3.0}};
  const Matrix big_u{{2.0, 1.0}};
  CHECK(instrument_prob(big, big_u)[0] > 0.9999);

  const Confounders x = sample_confounders({4, 4, 50000, 3});
  const auto s = gen_instrument(x.c, x.u, 3);
  CHECK(std::abs(mean_of(s) - 0.5) < 0.02);
  CHECK(std::all_of(s.begin(), s.end(), [](double v) { return v == 0.0 || v == 1.0; }));
  CHECK(gen_instrument(x.c, x.u, 3) == s);
  CHECK_THROWS_AS(gen_instrument(x.c, Matrix(3, 4), 3), ShapeError);
}

TEST_CASE("gen_treatment") {
  const Matrix zero(1, 3, 0.0);
  const std::vector<double> s0{0.0};
  const std::vector<double> s1{1.0};
  CHECK(treatment_prob(s0, zero, zero)[0] == 0.5);

  const Matrix c{{0.4, 0.3}};
  const Matrix u{{-0.2}};
  const double p0 = treatment_prob(s0, c, u)[0];
  const double p1 = treatment_prob(s1, c, u)[0];
  CHECK(p1 > p0);
  CHECK(p0 == doctest::Approx(1.0 / (1.0 + std::exp(-(0.7 - 0.2)))));
  CHECK(p1 == doctest::Approx(1.0 / (1.0 + std::exp(-(0.7 + 0.7 - 0.2)))));

  SUBCASE("relevance") {
    const Confounders x = sample_confounders({4, 4, 50000, 8});
    const auto s = gen_instrument(x.c, x.u, 8);
    const auto w = gen_treatment(s, x.c, x.u, 8);
    double w1 = 0.0, n1 = 0.0, w0 = 0.0, n0 = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      (s[i] == 1.0 ? w1 : w0) += w[i];
      (s[i] == 1.0 ? n1 : n0) += 1.0;
    }
    CHECK(w1 / n1 - w0 / n0 > 0.05);
  }
}

TEST_CASE("gen_outcome") {
  const Matrix c{{0.0, 0.0}, {2.0, 0.0}};
  const Matrix u{{0.0}, {1.0}};
  const std::vector<double> w{1.0, 0.0};
  SUBCASE("hand values") {
    const Matrix c1{{2.0}};
    const Matrix u1{{1.0}};
    const std::vector<double> treated{1.0};
    const Outcomes o = gen_outcome(treated, c1, u1, 0.0, 1);
    CHECK(o.y1[0] == 2.5);
    CHECK(o.y0[0] == 1.5);
    CHECK(o.y[0] == 2.5);
    const Outcomes z = gen_outcome(w, c, u, 0.0, 1);
    CHECK(z.y1[0] == 0.0);
    CHECK(z.y0[0] == 0.0);
  }
  SUBCASE("consistency without noise") {
    const Confounders x = sample_confounders({3, 2, 500, 4});
    const auto s = gen_instrument(x.c, x.u, 4);
    const auto tw = gen_treatment(s, x.c, x.u, 4);
    const Outcomes o = gen_outcome(tw, x.c, x.u, 0.0, 4);
    for (std::size_t i = 0; i < tw.size(); ++i) CHECK(o.y[i] == tw[i] * o.y1[i] + (1.0 - tw[i]) * o.y0[i]);
  }
  SUBCASE("noise moves Y only") {
    const Outcomes a = gen_outcome(w, c, u, 0.0, 9);
    const Outcomes b = gen_outcome(w, c, u, 0.5, 9);
    CHECK(a.y1 == b.y1);
    CHECK(a.y0 == b.y0);
    CHECK(a.y != b.y);
    CHECK_THROWS_AS(gen_outcome(w, c, u, -1.0, 9), ArgumentError);
  }
}

TEST_CASE("generate_synthetic") {
  SUBCASE("true ACE near one") {
    const CivDataset d = generate_synthetic({4, 4, 10000, 21});
    REQUIRE(d.truth.has_value());
    CHECK(std::abs(d.truth->true_ace - 1.0) < 0.06);
  }
  SUBCASE("schema and hidden block") {
    const CivDataset d = generate_synthetic({3, 2, 100, 1});
    CHECK(d.c.cols() == 3);  // observed table is C_1..C_3, S, W, Y
    CHECK(d.s.size() == 100);
    CHECK(d.w.size() == 100);
    CHECK(d.y.size() == 100);
    CHECK(d.truth->u.cols() == 2);
    CHECK_NOTHROW(d.validate());
    std::vector<double> diff;
    for (std::size_t i = 0; i < 100; ++i) diff.push_back(d.truth->y1[i] - d.truth->y0[i]);
    CHECK(d.truth->true_ace == doctest::Approx(mean_of(diff)).epsilon(1e-14));
  }
  SUBCASE("seeds") {
    const CivDataset a = generate_synthetic({4, 4, 200, 1});
    const CivDataset b = generate_synthetic({4, 4, 200, 2});
    const CivDataset a2 = generate_synthetic({4, 4, 200, 1});
    CHECK(a.s != b.s);
    CHECK(a.s == a2.s);
    CHECK(a.y == a2.y);
    CHECK(a.c == a2.c);
  }
  SUBCASE("positivity") {
    const Confounders x = sample_confounders({4, 4, 20000, 13});
    const auto ps = instrument_prob(x.c, x.u);
    const auto s = gen_instrument(x.c, x.u, 13);
    const auto pw = treatment_prob(s, x.c, x.u);
    for (const auto* v : {&ps, &pw}) {
      const auto [lo, hi] = std::minmax_element(v->begin(), v->end());
      CHECK(*lo >= 1e-12);
      CHECK(*hi <= 1.0 - 1e-12);
    }
  }
}

TEST_CASE("true ACE oracle") {
  // E[C^2] = 1 and E[C] = 0 for every column, so E[Y1 - Y0] = 1.
  const CivDataset d = generate_synthetic({4, 4, 50000, 99});
  std::vector<double> diff;
  for (std::size_t i = 0; i < d.size(); ++i) diff.push_back(d.truth->y1[i] - d.truth->y0[i]);
  const double m = mean_of(diff);
  double ss = 0.0;
  for (double v : diff) ss += (v - m) * (v - m);
  const double sd = std::sqrt(ss / (diff.size() - 1));
  CHECK(std::abs(m - 1.0) <= 3.0 * sd / std::sqrt(static_cast<double>(diff.size())));
}

TEST_CASE("read_covariate_table") {
  TempDir dir("table");
  SUBCASE("comma table with a drop list") {
    write_text(dir.file("t.csv"), "id, a ,b\n1, 0.5, -2\n2,1e-3,+4\n\n");
    const std::vector<std::string> drop{"id"};
    const CovariateTable t = read_covariate_table(dir.file("t.csv"), drop);
    CHECK(t.names == std::vector<std::string>{"a", "b"});
    CHECK(t.values == Matrix{{0.5, -2.0}, {1e-3, 4.0}});
  }
  SUBCASE("tab table") {
    write_text(dir.file("t.tsv"), "a\tb\n1\t2\n");
    CHECK(read_covariate_table(dir.file("t.tsv")).values == Matrix{{1.0, 2.0}});
  }
  SUBCASE("malformed cell") {
    write_text(dir.file("bad.csv"), "a,b,c\n1,2,3\n4,oops,6\n");
    try {
      read_covariate_table(dir.file("bad.csv"));
      FAIL("expected an ingestion error");
    } catch (const IngestionError& e) {
      CHECK(e.row() == 3);
      CHECK(e.column() == 2);
    }
    // Dropping the column makes the same file acceptable.
    const std::vector<std::string> drop{"b"};
    CHECK(read_covariate_table(dir.file("bad.csv"), drop).values.cols() == 2);
  }
  SUBCASE("empty and non-finite cells") {
    write_text(dir.file("e.csv"), "a,b\n1,\n");
    CHECK_THROWS_AS(read_covariate_table(dir.file("e.csv")), IngestionError);
    write_text(dir.file("n.csv"), "a,b\n1,nan\n");
    CHECK_THROWS_AS(read_covariate_table(dir.file("n.csv")), IngestionError);
  }
  SUBCASE("ragged row") {
    write_text(dir.file("r.csv"), "a,b\n1,2\n3\n");
    try {
      read_covariate_table(dir.file("r.csv"));
      FAIL("expected an ingestion error");
    } catch (const IngestionError& e) {
      CHECK(e.row() == 3);
    }
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(read_covariate_table(dir.file("absent.csv")), IoError);
  }
}

TEST_CASE("build_semi_synthetic") {
  TempDir dir("semi");
  write_text(dir.file("ihdp.csv"), ihdp_like_table(747));
  SemiSynSpec spec;
  spec.covariate_table_path = dir.file("ihdp.csv");
  spec.p = 2;
  spec.q = 2;
  spec.seed = 4;
  spec.drop_columns = {"id"};

  const SemiSynthetic a = build_semi_synthetic(spec);
  CHECK(a.data.dim() == 2);
  CHECK(a.data.size() == 747);
  CHECK(a.source_rows == 747);
  CHECK(a.data.truth->u.cols() == 2);
  CHECK(a.observed_columns.size() == 2);
  CHECK(a.hidden_columns.size() == 2);
  std::set<std::string> picked(a.observed_columns.begin(), a.observed_columns.end());
  picked.insert(a.hidden_columns.begin(), a.hidden_columns.end());
  CHECK(picked.size() == 4);
  CHECK(picked.count("id") == 0);

  SUBCASE("columns are standardized") {
    for (std::size_t j = 0; j < 2; ++j) {
      const auto col = a.data.c.col_values(j);
      const double m = mean_of(col);
      double v = 0.0;
      for (double x : col) v += (x - m) * (x - m);
      CHECK(std::abs(m) < 1e-12);
      CHECK(v / col.size() == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  SUBCASE("deterministic") {
    const SemiSynthetic b = build_semi_synthetic(spec);
    CHECK(b.data.c == a.data.c);
    CHECK(b.data.s == a.data.s);
    CHECK(b.data.w == a.data.w);
    CHECK(b.data.y == a.data.y);
    CHECK(b.observed_columns == a.observed_columns);
  }
  SUBCASE("treatment positivity") {
    const double wbar = mean_of(a.data.w);
    CHECK(wbar > 0.05);
    CHECK(wbar < 0.95);
  }
  SUBCASE("not enough columns") {
    SemiSynSpec wide = spec;
    wide.p = 20;
    wide.q = 5;
    CHECK_THROWS_AS(build_semi_synthetic(wide), ConfigError);
  }
  SUBCASE("malformed table") {
    write_text(dir.file("bad.csv"), "a,b,c\n1,2,3\n1,2,x\n");
    SemiSynSpec bad = spec;
    bad.covariate_table_path = dir.file("bad.csv");
    bad.drop_columns.clear();
    bad.p = 1;
    bad.q = 1;
    CHECK_THROWS_AS(build_semi_synthetic(bad), IngestionError);
  }
}

TEST_CASE("dataset files") {
  TempDir dir("data");
  const SynSpec spec{3, 2, 40, 12, 0.25};
  const CivDataset d = generate_synthetic(spec);
  const std::string manifest = write_dataset(d, manifest_for(spec, d), dir.path.string(), "syn");
  CHECK(fs::exists(dir.file("syn.csv")));
  CHECK(fs::exists(dir.file("syn.truth.csv")));

  std::ifstream head(dir.file("syn.csv"));
  std::string header;
  std::getline(head, header);
  CHECK(header == "C_1,C_2,C_3,S,W,Y");

  const LoadedDataset back = read_dataset(manifest);
  CHECK(back.data.c == d.c);
  CHECK(back.data.s == d.s);
  CHECK(back.data.w == d.w);
  CHECK(back.data.y == d.y);
  REQUIRE(back.data.truth.has_value());
  CHECK(back.data.truth->y1 == d.truth->y1);
  CHECK(back.data.truth->y0 == d.truth->y0);
  CHECK(back.data.truth->u == d.truth->u);
  CHECK(back.data.truth->true_ace == d.truth->true_ace);
  CHECK(back.manifest.kind == "synthetic");
  CHECK(back.manifest.name == "Syn-3-2");
  CHECK(back.manifest.seed == 12);
  CHECK(back.manifest.noise_sd == 0.25);
  CHECK(back.manifest.true_ace == d.truth->true_ace);
  CHECK(back.manifest.truth_file == "syn.truth.csv");

  SUBCASE("observed table alone") {
    fs::remove(dir.file("syn.truth.csv"));
    CHECK_FALSE(read_dataset(manifest).data.truth.has_value());
  }
  SUBCASE("missing directory") {
    CHECK_THROWS_AS(write_dataset(d, manifest_for(spec, d), dir.file("nope"), "x"), IoError);
  }
  SUBCASE("semi-synthetic manifest lists the chosen columns") {
    write_text(dir.file("cov.csv"), ihdp_like_table(60));
    SemiSynSpec s;
    s.covariate_table_path = dir.file("cov.csv");
    s.p = 2;
    s.q = 1;
    s.drop_columns = {"id"};
    const SemiSynthetic semi = build_semi_synthetic(s);
    const std::string m = write_dataset(semi.data, manifest_for(s, semi), dir.path.string(), "semi");
    const LoadedDataset loaded = read_dataset(m);
    CHECK(loaded.manifest.kind == "semi_synthetic");
    CHECK(loaded.manifest.selected_columns.size() == 3);
    CHECK(loaded.manifest.source_rows == 60);
    CHECK_FALSE(loaded.manifest.notes.empty());
  }
}
