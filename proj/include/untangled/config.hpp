#pragma once

// Scenario configuration: one YAML file describes one scenario.

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "untangled/errors.hpp"

namespace untangled {

inline constexpr int kSchemaVersion = 1;

struct ScalarSpec {
  std::string kind = "constant";
  std::vector<double> params = {0.0};
};

struct ScenarioConfig {
  int schema_version = kSchemaVersion;
  std::string id;
  int dimension = 1;

  std::string field_kind;
  std::vector<double> field_params;
  std::optional<double> growth_c;

  std::vector<double> lower, upper;

  double t_start = 0.0;
  double t_end = 1.0;
  std::size_t steps = 0;

  std::vector<double> delta_schedule;  // empty: default for the domain
  std::size_t samples = 64;
  std::size_t n_dir = 32;
  bool use_exact = true;

  std::size_t branch_factor = 2;
  std::size_t beam_width = 8;
  double merge_tol = 0.0;
  double resid_tol = 0.0;
  std::uint64_t seed = 1;

  std::size_t K = 32;
  int levels = 3;
  double tie_tol = 1e-9;

  std::vector<std::vector<double>> seed_points;
  std::size_t seeds_per_axis = 0;  // extra seeds at cell midpoints of the domain

  bool density = false;
  std::size_t particles = 100;  // per axis
  std::vector<double> region_lower, region_upper;
  std::size_t bins = 20;
  std::size_t atom_threshold = 0;  // 0: max(2, ceil(0.01 N))
  std::vector<double> snapshots;   // empty: start, quarters, end

  bool transport = false;
  ScalarSpec c, f, u0;
  std::optional<double> lambda_shift;  // unset: smallest admissible shift

  bool galerkin = false;
  std::size_t cells = 16;
  std::size_t quadrature = 2;
  std::size_t galerkin_nodes = 8;
  bool raw_hats = false;

  std::size_t semigroup_levels = 4;
  std::vector<std::vector<double>> semigroup_points;  // empty: the seed points
  double resep_factor = 10.0;
  std::vector<std::size_t> stability_K;
  std::string fixture;  // "tangled": replace the flow in the untangledness check

  std::vector<double> epsilons;
  std::vector<std::size_t> galerkin_cells;
  std::size_t study_particles = 200;

  std::string output_dir = "out";

  double dt() const { return (t_end - t_start) / static_cast<double>(steps); }
};

namespace detail {

/// Walks a YAML tree, naming the dotted path in every error and rejecting
/// keys nobody asked for.
class ConfigReader {
 public:
  ConfigReader(YAML::Node node, std::string path) : node_(std::move(node)), path_(std::move(path)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) fail("", "must be a mapping");
  }

  bool present() const { return node_ && !node_.IsNull(); }
  bool has(const std::string& key) { return present() && use(key); }

  ConfigReader child(const std::string& key) {
    const bool there = has(key);
    return ConfigReader(there ? node_[key] : YAML::Node(), join(key));
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return as<T>(node_[key], key);
  }

  template <typename T>
  T require(const std::string& key) {
    if (!has(key)) fail(key, "is required");
    return as<T>(node_[key], key);
  }

  template <typename T>
  std::vector<T> list(const std::string& key, std::vector<T> fallback = {}) {
    if (!has(key)) return fallback;
    const auto n = node_[key];
    if (!n.IsSequence()) fail(key, "must be a list");
    std::vector<T> out;
    for (std::size_t i = 0; i < n.size(); ++i) out.push_back(as<T>(n[i], key + "[" + std::to_string(i) + "]"));
    return out;
  }

  std::vector<std::vector<double>> points(const std::string& key) {
    if (!has(key)) return {};
    const auto n = node_[key];
    if (!n.IsSequence()) fail(key, "must be a list of points");
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < n.size(); ++i) {
      const std::string at = key + "[" + std::to_string(i) + "]";
      if (n[i].IsScalar()) {
        out.push_back({as<double>(n[i], at)});
        continue;
      }
      if (!n[i].IsSequence()) fail(at, "must be a number or a list of numbers");
      std::vector<double> p;
      for (std::size_t d = 0; d < n[i].size(); ++d) p.push_back(as<double>(n[i][d], at + "[" + std::to_string(d) + "]"));
      out.push_back(std::move(p));
    }
    return out;
  }

  ScalarSpec scalar(const std::string& key, ScalarSpec fallback) {
    if (!has(key)) return fallback;
    auto r = child(key);
    ScalarSpec s;
    s.kind = r.require<std::string>("kind");
    s.params = r.list<double>("params");
    r.finish();
    return s;
  }

  /// Rejects keys that were never read.
  void finish() const {
    if (!present()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!used_.count(key)) fail(key, "is not a recognised key");
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError(join(key) + " " + what);
  }

  std::string join(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  bool use(const std::string& key) {
    if (!node_[key]) return false;
    used_.insert(key);
    return true;
  }

  template <typename T>
  T as(const YAML::Node& n, const std::string& key) const {
    if (!n.IsScalar()) fail(key, "must be a scalar");
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        const auto v = n.as<long long>();
        if (v < 0) fail(key, "must be nonnegative");
        return static_cast<T>(v);
      } else {
        return n.as<T>();
      }
    } catch (const YAML::Exception&) {
      fail(key, "has the wrong type ('" + n.Scalar() + "')");
    }
  }

  YAML::Node node_;
  std::string path_;
  std::set<std::string> used_;
};

inline void require_positive(double v, const std::string& name) {
  if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(name + " must be positive");
}

inline void require_nonnegative(double v, const std::string& name) {
  if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(name + " must be nonnegative");
}

inline void require_point(const std::vector<double>& p, int dim, const std::string& name) {
  if (static_cast<int>(p.size()) != dim) {
    throw ConfigError(name + " must have " + std::to_string(dim) + " coordinate(s)");
  }
  for (double v : p) {
    if (!std::isfinite(v)) throw ConfigError(name + " must be finite");
  }
}

}  // namespace detail

/// Structural validation that does not need the registries; the registries
/// check ids and parameter counts when the pipeline builds its objects.
inline void validate(const ScenarioConfig& c) {
  using namespace detail;
  if (c.schema_version != kSchemaVersion) {
    throw ConfigError("schema_version " + std::to_string(c.schema_version) + " is not supported (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
  if (c.id.empty()) throw ConfigError("id must not be empty");
  if (c.dimension != 1 && c.dimension != 2) throw ConfigError("dimension must be 1 or 2");
  require_point(c.lower, c.dimension, "domain.lower");
  require_point(c.upper, c.dimension, "domain.upper");
  for (int d = 0; d < c.dimension; ++d) {
    if (!(c.lower[static_cast<std::size_t>(d)] < c.upper[static_cast<std::size_t>(d)])) {
      throw ConfigError("domain.lower must be below domain.upper");
    }
  }
  if (!(c.t_end > c.t_start)) throw ConfigError("time.t_end must exceed time.t_start");
  if (c.steps == 0) throw ConfigError("time.steps must be positive");
  if (c.growth_c) require_nonnegative(*c.growth_c, "field.growth_c");
  for (double d : c.delta_schedule) require_positive(d, "envelope.delta_schedule");
  if (c.samples == 0) throw ConfigError("envelope.samples must be positive");
  if (c.n_dir < 4) throw ConfigError("envelope.n_dir must be at least 4");
  if (c.branch_factor == 0) throw ConfigError("funnel.branch_factor must be positive");
  if (c.beam_width == 0) throw ConfigError("funnel.beam_width must be positive");
  require_nonnegative(c.merge_tol, "funnel.merge_tol");
  require_nonnegative(c.resid_tol, "funnel.resid_tol");
  if (c.K == 0) throw ConfigError("selection.K must be positive");
  if (c.levels < 0) throw ConfigError("selection.levels must be nonnegative");
  require_positive(c.tie_tol, "selection.tie_tol");
  for (std::size_t i = 0; i < c.seed_points.size(); ++i) {
    require_point(c.seed_points[i], c.dimension, "seeds.points[" + std::to_string(i) + "]");
  }
  if (c.seed_points.empty() && c.seeds_per_axis == 0) throw ConfigError("seeds: give points or per_axis");
  if (c.density) {
    if (c.particles == 0) throw ConfigError("density.particles must be positive");
    if (c.bins == 0) throw ConfigError("density.bins must be positive");
    require_point(c.region_lower, c.dimension, "density.region.lower");
    require_point(c.region_upper, c.dimension, "density.region.upper");
    for (double t : c.snapshots) {
      if (!(t >= c.t_start && t <= c.t_end)) throw ConfigError("density.snapshots must lie in [t_start, t_end]");
    }
  }
  if (c.lambda_shift) require_nonnegative(*c.lambda_shift, "transport.lambda_shift");
  if (c.galerkin) {
    if (!c.transport) throw ConfigError("galerkin needs a transport block");
    if (c.cells == 0) throw ConfigError("galerkin.cells must be positive");
    if (c.quadrature == 0) throw ConfigError("galerkin.quadrature must be positive");
    if (c.galerkin_nodes == 0) throw ConfigError("galerkin.nodes must be positive");
  }
  if (c.semigroup_levels < 2) throw ConfigError("verify.semigroup_levels must be at least 2");
  for (std::size_t i = 0; i < c.semigroup_points.size(); ++i) {
    require_point(c.semigroup_points[i], c.dimension, "verify.semigroup_points[" + std::to_string(i) + "]");
  }
  require_positive(c.resep_factor, "verify.resep_factor");
  for (auto k : c.stability_K) {
    if (k == 0) throw ConfigError("verify.stability_K entries must be positive");
  }
  if (!c.fixture.empty() && c.fixture != "tangled") throw ConfigError("verify.fixture must be 'tangled'");
  if (c.fixture == "tangled" && c.dimension != 1) throw ConfigError("verify.fixture 'tangled' needs dimension 1");
  for (double e : c.epsilons) require_positive(e, "study.mollification");
  if (!c.epsilons.empty()) {
    if (c.dimension != 1 || c.field_kind != "compressive-sign") {
      throw ConfigError("study.mollification needs the 1D compressive-sign field");
    }
  }
  for (auto n : c.galerkin_cells) {
    if (n == 0) throw ConfigError("study.galerkin_cells entries must be positive");
  }
  if (!c.galerkin_cells.empty() && !c.transport) throw ConfigError("study.galerkin_cells needs a transport block");
  if (c.study_particles == 0) throw ConfigError("study.particles must be positive");
  if (c.output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

inline ScenarioConfig parse_config(const YAML::Node& root) {
  using detail::ConfigReader;
  if (!root || !root.IsMap()) throw ConfigError("config must be a mapping");
  ConfigReader r(root, "");
  ScenarioConfig c;
  c.schema_version = r.require<int>("schema_version");
  c.id = r.require<std::string>("id");
  c.dimension = r.get<int>("dimension", 1);

  auto field = r.child("field");
  if (!field.present()) r.fail("field", "is required");
  c.field_kind = field.require<std::string>("kind");
  c.field_params = field.list<double>("params");
  if (field.has("growth_c")) c.growth_c = field.require<double>("growth_c");
  field.finish();

  auto domain = r.child("domain");
  if (!domain.present()) r.fail("domain", "is required");
  c.lower = domain.list<double>("lower");
  c.upper = domain.list<double>("upper");
  domain.finish();

  auto time = r.child("time");
  if (!time.present()) r.fail("time", "is required");
  c.t_start = time.get<double>("t_start", 0.0);
  c.t_end = time.require<double>("t_end");
  const bool has_dt = time.has("dt");
  const bool has_steps = time.has("steps");
  if (has_dt == has_steps) time.fail("", "needs exactly one of dt and steps");
  if (has_dt) {
    const double dt = time.require<double>("dt");
    detail::require_positive(dt, "time.dt");
    const double n = (c.t_end - c.t_start) / dt;
    if (!(n >= 0.5) || std::abs(n - std::round(n)) > 1e-9 * std::max(1.0, n)) {
      throw ConfigError("time.dt must divide t_end - t_start");
    }
    c.steps = static_cast<std::size_t>(std::llround(n));
  } else {
    const auto steps = time.require<long long>("steps");
    if (steps <= 0) throw ConfigError("time.steps must be positive");
    c.steps = static_cast<std::size_t>(steps);
  }
  time.finish();

  auto env = r.child("envelope");
  c.delta_schedule = env.list<double>("delta_schedule");
  c.samples = env.get<std::size_t>("samples", c.samples);
  c.n_dir = env.get<std::size_t>("n_dir", c.n_dir);
  c.use_exact = env.get<bool>("use_exact", c.use_exact);
  env.finish();

  auto fun = r.child("funnel");
  c.branch_factor = fun.get<std::size_t>("branch_factor", c.branch_factor);
  c.beam_width = fun.get<std::size_t>("beam_width", c.beam_width);
  c.merge_tol = fun.get<double>("merge_tol", c.merge_tol);
  c.resid_tol = fun.get<double>("resid_tol", c.resid_tol);
  c.seed = fun.get<std::uint64_t>("seed", c.seed);
  fun.finish();

  auto sel = r.child("selection");
  c.K = sel.get<std::size_t>("K", c.K);
  c.levels = sel.get<int>("levels", c.levels);
  c.tie_tol = sel.get<double>("tie_tol", c.tie_tol);
  sel.finish();

  auto seeds = r.child("seeds");
  c.seed_points = seeds.points("points");
  c.seeds_per_axis = seeds.get<std::size_t>("per_axis", 0);
  seeds.finish();

  auto den = r.child("density");
  c.density = den.present();
  c.particles = den.get<std::size_t>("particles", c.particles);
  c.bins = den.get<std::size_t>("bins", c.bins);
  c.atom_threshold = den.get<std::size_t>("atom_threshold", c.atom_threshold);
  c.snapshots = den.list<double>("snapshots");
  auto region = den.child("region");
  c.region_lower = region.list<double>("lower", c.lower);
  c.region_upper = region.list<double>("upper", c.upper);
  region.finish();
  den.finish();

  auto tr = r.child("transport");
  c.transport = tr.present();
  c.c = tr.scalar("c", {});
  c.f = tr.scalar("f", {});
  c.u0 = tr.scalar("u0", {"constant", {1.0}});
  if (tr.has("lambda_shift")) c.lambda_shift = tr.require<double>("lambda_shift");
  tr.finish();

  auto gal = r.child("galerkin");
  c.galerkin = gal.present();
  c.cells = gal.get<std::size_t>("cells", c.cells);
  c.quadrature = gal.get<std::size_t>("quadrature", c.quadrature);
  c.galerkin_nodes = gal.get<std::size_t>("nodes", c.galerkin_nodes);
  const auto basis = gal.get<std::string>("basis", "adjoint");
  if (basis != "adjoint" && basis != "raw") gal.fail("basis", "must be 'adjoint' or 'raw'");
  c.raw_hats = basis == "raw";
  gal.finish();

  auto ver = r.child("verify");
  c.semigroup_levels = ver.get<std::size_t>("semigroup_levels", c.semigroup_levels);
  c.semigroup_points = ver.points("semigroup_points");
  c.resep_factor = ver.get<double>("resep_factor", c.resep_factor);
  c.stability_K = ver.list<std::size_t>("stability_K");
  c.fixture = ver.get<std::string>("fixture", "");
  ver.finish();

  auto st = r.child("study");
  c.epsilons = st.list<double>("mollification");
  c.galerkin_cells = st.list<std::size_t>("galerkin_cells");
  c.study_particles = st.get<std::size_t>("particles", c.study_particles);
  st.finish();

  c.output_dir = r.get<std::string>("output_dir", "out/" + c.id);
  r.finish();
  validate(c);
  return c;
}

inline ScenarioConfig load_config_text(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config is not valid YAML: ") + e.what());
  }
  return parse_config(root);
}

inline ScenarioConfig load_config(const std::string& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path);
  } catch (const YAML::BadFile&) {
    throw ConfigError("cannot read config file '" + path + "'");
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("config is not valid YAML: ") + e.what());
  }
  return parse_config(root);
}

}  // namespace untangled
