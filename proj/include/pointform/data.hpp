#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pointform/geometry.hpp"
#include "pointform/rng.hpp"
#include "pointform/tensor.hpp"

namespace pf {

// ---- shape grammar ----

enum class ShapeFamily { Sphere, Box, Cylinder, Torus };

inline const char* family_word(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::Sphere: return "sphere";
    case ShapeFamily::Box: return "box";
    case ShapeFamily::Cylinder: return "cylinder";
    case ShapeFamily::Torus: return "torus";
  }
  throw ValueError("family_word: bad family");
}

// measure word used in captions; the box quotes its full edge
inline const char* measure_word(ShapeFamily f) {
  return f == ShapeFamily::Box ? "edge" : "radius";
}

struct Palette {
  const char* name;
  double r, g, b;
};

inline const std::array<Palette, 8>& palette() {
  static const std::array<Palette, 8> p{{{"red", 1, 0, 0},
                                         {"green", 0, 1, 0},
                                         {"blue", 0, 0, 1},
                                         {"yellow", 1, 1, 0},
                                         {"purple", 0.5, 0, 0.5},
                                         {"orange", 1, 0.5, 0},
                                         {"white", 1, 1, 1},
                                         {"gray", 0.5, 0.5, 0.5}}};
  return p;
}

inline const Palette& palette_entry(const std::string& name) {
  for (const auto& p : palette())
    if (name == p.name) return p;
  throw ValueError(cat("palette: unknown color ", name));
}

// quantized so each size names exactly one grammar token
inline const std::array<double, 4>& size_grid() {
  static const std::array<double, 4> s{0.2, 0.3, 0.4, 0.5};
  return s;
}

inline std::string number_word(double v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  return buf;
}

struct PrimitiveSpec {
  ShapeFamily family = ShapeFamily::Sphere;
  std::string color = "red";
  double size = 0.4;  // radius, or half-edge for boxes
};

enum class Relation { None, LeftOf, Above };

// a single primitive, or two primitives of distinct families in a
// fixed spatial relation; everything here must survive caption round-trip
struct ShapeSpec {
  std::vector<PrimitiveSpec> parts;
  Relation relation = Relation::None;

  bool composite() const { return parts.size() == 2; }

  bool operator==(const ShapeSpec& o) const {
    if (parts.size() != o.parts.size() || relation != o.relation) return false;
    for (std::size_t i = 0; i < parts.size(); ++i)
      if (parts[i].family != o.parts[i].family ||
          parts[i].color != o.parts[i].color ||
          std::abs(parts[i].size - o.parts[i].size) > 1e-9)
        return false;
    return true;
  }
};

// ---- captions: spec -> text and back, an exact bijection ----

inline std::string primitive_phrase(const PrimitiveSpec& p) {
  double quoted = p.family == ShapeFamily::Box ? 2 * p.size : p.size;
  return cat("a ", p.color, " ", family_word(p.family), " of ",
             measure_word(p.family), " ", number_word(quoted));
}

inline std::string caption(const ShapeSpec& spec) {
  check(!spec.parts.empty() && spec.parts.size() <= 2,
        "caption: spec must have one or two parts");
  if (!spec.composite()) return primitive_phrase(spec.parts[0]);
  const char* rel = spec.relation == Relation::LeftOf ? "left of" : "above";
  return cat(primitive_phrase(spec.parts[0]), " ", rel, " ",
             primitive_phrase(spec.parts[1]));
}

namespace detail {

inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream is(text);
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

inline PrimitiveSpec parse_primitive(const std::vector<std::string>& w,
                                     std::size_t at) {
  check(at + 6 <= w.size() && w[at] == "a" && w[at + 3] == "of",
        "parse_caption: malformed primitive phrase");
  PrimitiveSpec p;
  p.color = w[at + 1];
  palette_entry(p.color);
  bool fam = false;
  for (auto f : {ShapeFamily::Sphere, ShapeFamily::Box, ShapeFamily::Cylinder,
                 ShapeFamily::Torus})
    if (w[at + 2] == family_word(f)) {
      p.family = f;
      fam = true;
    }
  check(fam, cat("parse_caption: unknown family ", w[at + 2]));
  check(w[at + 4] == measure_word(p.family),
        cat("parse_caption: expected ", measure_word(p.family), ", got ", w[at + 4]));
  double quoted = std::stod(w[at + 5]);
  p.size = p.family == ShapeFamily::Box ? quoted / 2 : quoted;
  return p;
}

}  // namespace detail

inline ShapeSpec parse_caption(const std::string& text) {
  auto words = detail::split_words(text);
  check(words.size() == 6 || words.size() == 13 || words.size() == 14,
        cat("parse_caption: unexpected word count ", words.size()));
  ShapeSpec spec;
  spec.parts.push_back(detail::parse_primitive(words, 0));
  if (words.size() == 6) return spec;
  std::size_t second;
  if (words[6] == "left") {
    check(words.size() == 14 && words[7] == "of", "parse_caption: bad relation");
    spec.relation = Relation::LeftOf;
    second = 8;
  } else {
    check(words.size() == 13 && words[6] == "above", "parse_caption: bad relation");
    spec.relation = Relation::Above;
    second = 7;
  }
  spec.parts.push_back(detail::parse_primitive(words, second));
  check(spec.parts[0].family != spec.parts[1].family,
        "parse_caption: composite parts must differ in family");
  return spec;
}

// ---- question/answer pairs ----

struct QaPair {
  std::string kind;
  std::string question;
  std::string answer;
};

inline std::vector<QaPair> qa_pairs(const ShapeSpec& spec) {
  std::vector<QaPair> out;
  if (!spec.composite()) {
    const auto& p = spec.parts[0];
    out.push_back({"category", "what shape is this ?",
                   cat("a ", family_word(p.family))});
    out.push_back({"color", cat("what color is the ", family_word(p.family), " ?"),
                   p.color});
    out.push_back({"count", "how many parts does this shape have ?", "one"});
  } else {
    const auto& a = spec.parts[0];
    const auto& b = spec.parts[1];
    out.push_back({"category", "what shape is this ?",
                   cat("a ", family_word(a.family), " and a ",
                       family_word(b.family))});
    out.push_back({"color", cat("what color is the ", family_word(a.family), " ?"),
                   a.color});
    out.push_back({"count", "how many parts does this shape have ?", "two"});
    out.push_back({"relation",
                   cat("where is the ", family_word(a.family), " relative to the ",
                       family_word(b.family), " ?"),
                   spec.relation == Relation::LeftOf ? "left" : "above"});
  }
  return out;
}

// ---- tokenizer over the closed grammar ----

struct Tokenizer {
  static constexpr int kPad = 0, kBos = 1, kEos = 2, kSep = 3, kUnk = 4;

  std::vector<std::string> words;
  std::map<std::string, int> index;

  Tokenizer() {
    words = {"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};
    const char* grammar[] = {
        "a",        "of",    "radius", "edge",   "sphere", "box",   "cylinder",
        "torus",    "red",   "green",  "blue",   "yellow", "purple", "orange",
        "white",    "gray",  "left",   "above",  "0.2",    "0.3",   "0.4",
        "0.5",      "0.6",   "0.8",    "1.0",    "what",   "shape", "is",
        "this",     "?",     "color",  "the",    "where",  "relative", "to",
        "how",      "many",  "parts",  "does",   "have",   "one",   "two",
        "and"};
    for (const char* w : grammar) words.push_back(w);
    for (std::size_t i = 0; i < words.size(); ++i) index[words[i]] = int(i);
  }

  std::size_t size() const { return words.size(); }

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    for (const auto& w : detail::split_words(text)) {
      auto it = index.find(w);
      check(it != index.end(), cat("tokenizer: word '", w, "' not in grammar"));
      ids.push_back(it->second);
    }
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      check(id >= 0 && std::size_t(id) < words.size(),
            cat("tokenizer: id ", id, " out of range"));
      if (!out.empty()) out += " ";
      out += words[id];
    }
    return out;
  }
};

// ---- surface samplers ----

namespace detail {

inline Eigen::Vector3d sphere_point(double r, Rng& rng) {
  Eigen::Vector3d d;
  double n;
  do {
    d << rng.gaussian(), rng.gaussian(), rng.gaussian();
    n = d.norm();
  } while (n < 1e-9);
  return d * (r / n);
}

inline Eigen::Vector3d box_point(double h, Rng& rng) {
  std::size_t face = rng.index(6);
  double u = rng.uniform(-h, h), v = rng.uniform(-h, h);
  double s = face % 2 ? h : -h;
  switch (face / 2) {
    case 0: return {s, u, v};
    case 1: return {u, s, v};
    default: return {u, v, s};
  }
}

// right cylinder of radius r and height 2r, axis z, caps included
inline Eigen::Vector3d cylinder_point(double r, Rng& rng) {
  double side_area = 2 * std::numbers::pi * r * (2 * r);
  double cap_area = 2 * std::numbers::pi * r * r;
  if (rng.uniform() < side_area / (side_area + cap_area)) {
    double th = rng.uniform(0, 2 * std::numbers::pi);
    return {r * std::cos(th), r * std::sin(th), rng.uniform(-r, r)};
  }
  double z = rng.uniform() < 0.5 ? -r : r;
  double rad = r * std::sqrt(rng.uniform());
  double th = rng.uniform(0, 2 * std::numbers::pi);
  return {rad * std::cos(th), rad * std::sin(th), z};
}

// torus with major radius R and minor radius 0.4 R; area-uniform via
// rejection on the (R + r cos v) density
inline Eigen::Vector3d torus_point(double R, Rng& rng) {
  double r = 0.4 * R;
  double u = rng.uniform(0, 2 * std::numbers::pi);
  double v;
  while (true) {
    v = rng.uniform(0, 2 * std::numbers::pi);
    if (rng.uniform() * (R + r) <= R + r * std::cos(v)) break;
  }
  double ring = R + r * std::cos(v);
  return {ring * std::cos(u), ring * std::sin(u), r * std::sin(v)};
}

inline Eigen::Vector3d primitive_point(const PrimitiveSpec& p, Rng& rng) {
  switch (p.family) {
    case ShapeFamily::Sphere: return sphere_point(p.size, rng);
    case ShapeFamily::Box: return box_point(p.size, rng);
    case ShapeFamily::Cylinder: return cylinder_point(p.size, rng);
    case ShapeFamily::Torus: return torus_point(p.size, rng);
  }
  throw ValueError("primitive_point: bad family");
}

inline double surface_area(const PrimitiveSpec& p) {
  double s = p.size;
  switch (p.family) {
    case ShapeFamily::Sphere: return 4 * std::numbers::pi * s * s;
    case ShapeFamily::Box: return 24 * s * s;
    case ShapeFamily::Cylinder: return 6 * std::numbers::pi * s * s;
    case ShapeFamily::Torus:
      return 4 * std::numbers::pi * std::numbers::pi * s * (0.4 * s);
  }
  throw ValueError("surface_area: bad family");
}

// how far the surface reaches from the center along one axis
inline double axis_extent(const PrimitiveSpec& p, int axis) {
  if (p.family == ShapeFamily::Torus)
    return axis == 2 ? 0.4 * p.size : 1.4 * p.size;
  return p.size;
}

// centers chosen so surfaces sit a fixed gap apart along the relation axis
inline std::array<Eigen::Vector3d, 2> composite_offsets(const ShapeSpec& spec) {
  const double gap = 0.1;
  int axis = spec.relation == Relation::LeftOf ? 0 : 2;
  double sign_a = spec.relation == Relation::LeftOf ? -1 : 1;
  std::array<Eigen::Vector3d, 2> at{Eigen::Vector3d::Zero(),
                                    Eigen::Vector3d::Zero()};
  at[0](axis) = sign_a * (axis_extent(spec.parts[0], axis) + gap / 2);
  at[1](axis) = -sign_a * (axis_extent(spec.parts[1], axis) + gap / 2);
  return at;
}

}  // namespace detail

// area-weighted surface sampling of the spec, constant part colors,
// optional Gaussian jitter; point order is part-major then draw order
template <class S>
Cloud<S> generate(const ShapeSpec& spec, std::size_t n_points, double sigma,
                  Rng rng) {
  check(n_points > 0, "generate: n_points must be positive");
  check(!spec.parts.empty() && spec.parts.size() <= 2,
        "generate: spec must have one or two parts");
  check(sigma >= 0, "generate: sigma must be non-negative");
  if (spec.composite())
    check(spec.parts[0].family != spec.parts[1].family,
          "generate: composite parts must differ in family");

  std::vector<std::size_t> counts(spec.parts.size(), n_points);
  std::array<Eigen::Vector3d, 2> offsets{Eigen::Vector3d::Zero(),
                                         Eigen::Vector3d::Zero()};
  if (spec.composite()) {
    double a0 = detail::surface_area(spec.parts[0]);
    double a1 = detail::surface_area(spec.parts[1]);
    counts[0] = std::size_t(std::floor(double(n_points) * a0 / (a0 + a1)));
    counts[0] = std::max<std::size_t>(1, std::min(counts[0], n_points - 1));
    counts[1] = n_points - counts[0];
    offsets = detail::composite_offsets(spec);
  }

  Cloud<S> cloud;
  cloud.pos.resize(Eigen::Index(n_points), 3);
  cloud.color.resize(Eigen::Index(n_points), 3);
  std::size_t at = 0;
  for (std::size_t part = 0; part < spec.parts.size(); ++part) {
    const auto& p = spec.parts[part];
    const auto& col = palette_entry(p.color);
    for (std::size_t i = 0; i < counts[part]; ++i, ++at) {
      Eigen::Vector3d pt = detail::primitive_point(p, rng) + offsets[part];
      if (sigma > 0)
        for (int a = 0; a < 3; ++a) pt(a) += sigma * rng.gaussian();
      for (int a = 0; a < 3; ++a) cloud.pos(Eigen::Index(at), a) = S(pt(a));
      cloud.color.row(Eigen::Index(at)) << S(col.r), S(col.g), S(col.b);
    }
  }
  return cloud;
}

// draw a spec from the quantized grammar grids
inline ShapeSpec sample_spec(Rng& rng, double composite_fraction = 0.3) {
  auto draw_primitive = [&rng] {
    PrimitiveSpec p;
    p.family = std::array{ShapeFamily::Sphere, ShapeFamily::Box,
                          ShapeFamily::Cylinder, ShapeFamily::Torus}[rng.index(4)];
    p.color = palette()[rng.index(palette().size())].name;
    p.size = size_grid()[rng.index(size_grid().size())];
    return p;
  };
  ShapeSpec spec;
  spec.parts.push_back(draw_primitive());
  if (rng.uniform() < composite_fraction) {
    PrimitiveSpec second = draw_primitive();
    while (second.family == spec.parts[0].family)
      second.family = std::array{ShapeFamily::Sphere, ShapeFamily::Box,
                                 ShapeFamily::Cylinder,
                                 ShapeFamily::Torus}[rng.index(4)];
    spec.parts.push_back(second);
    spec.relation = rng.uniform() < 0.5 ? Relation::LeftOf : Relation::Above;
  }
  return spec;
}

// ---- cloud files ----

inline constexpr std::uint32_t kCloudVersion = 1;

template <class S>
void save_cloud_binary(const std::string& path, const Cloud<S>& cloud) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(cat("cloud: cannot open ", path, " for writing"));
  os.write("PFPC", 4);
  auto put32 = [&os](std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
  };
  put32(kCloudVersion);
  std::uint64_t n = cloud.size();
  os.write(reinterpret_cast<const char*>(&n), 8);
  put32(cloud.has_color() ? 1u : 0u);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (int a = 0; a < 3; ++a) {
      float v = float(cloud.pos(Eigen::Index(i), a));
      os.write(reinterpret_cast<const char*>(&v), 4);
    }
  if (cloud.has_color())
    for (std::size_t i = 0; i < cloud.size(); ++i)
      for (int a = 0; a < 3; ++a) {
        float v = float(cloud.color(Eigen::Index(i), a));
        os.write(reinterpret_cast<const char*>(&v), 4);
      }
  if (!os) throw IoError(cat("cloud: write failed for ", path));
}

template <class S>
Cloud<S> load_cloud_binary(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(cat("cloud: cannot open ", path));
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PFPC", 4) != 0)
    throw IoError(cat("cloud: ", path, " lacks PFPC magic"));
  std::uint32_t version{};
  is.read(reinterpret_cast<char*>(&version), 4);
  if (!is || version != kCloudVersion)
    throw IoError(cat("cloud: unsupported version in ", path));
  std::uint64_t n{};
  is.read(reinterpret_cast<char*>(&n), 8);
  std::uint32_t flags{};
  is.read(reinterpret_cast<char*>(&flags), 4);
  if (!is) throw IoError(cat("cloud: truncated header in ", path));
  if (n == 0) throw IoError(cat("cloud: ", path, " holds no points"));
  Cloud<S> cloud;
  cloud.pos.resize(Eigen::Index(n), 3);
  bool colored = flags & 1u;
  if (colored) cloud.color.resize(Eigen::Index(n), 3);
  auto read_block = [&](Points<S>& dst) {
    for (std::uint64_t i = 0; i < n; ++i)
      for (int a = 0; a < 3; ++a) {
        float v{};
        is.read(reinterpret_cast<char*>(&v), 4);
        dst(Eigen::Index(i), a) = S(v);
      }
    if (!is) throw IoError(cat("cloud: truncated payload in ", path));
  };
  read_block(cloud.pos);
  if (colored) read_block(cloud.color);
  return cloud;
}

template <class S>
void save_cloud_text(const std::string& path, const Cloud<S>& cloud) {
  std::ofstream os(path);
  if (!os) throw IoError(cat("cloud: cannot open ", path, " for writing"));
  char line[160];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (cloud.has_color())
      std::snprintf(line, sizeof(line), "%.9g %.9g %.9g %.9g %.9g %.9g\n",
                    double(cloud.pos(Eigen::Index(i), 0)),
                    double(cloud.pos(Eigen::Index(i), 1)),
                    double(cloud.pos(Eigen::Index(i), 2)),
                    double(cloud.color(Eigen::Index(i), 0)),
                    double(cloud.color(Eigen::Index(i), 1)),
                    double(cloud.color(Eigen::Index(i), 2)));
    else
      std::snprintf(line, sizeof(line), "%.9g %.9g %.9g\n",
                    double(cloud.pos(Eigen::Index(i), 0)),
                    double(cloud.pos(Eigen::Index(i), 1)),
                    double(cloud.pos(Eigen::Index(i), 2)));
    os << line;
  }
}

template <class S>
Cloud<S> load_cloud_text(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(cat("cloud: cannot open ", path));
  std::vector<std::array<double, 6>> rows;
  std::optional<bool> colored;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::array<double, 6> vals{};
    int got = 0;
    double v;
    while (ls >> v) {
      if (got < 6) vals[got] = v;
      ++got;
    }
    if (got == 0) continue;  // blank or comment
    if (got != 3 && got != 6)
      throw IoError(cat("cloud: ", path, " line ", lineno, " has ", got,
                        " columns, expected 3 or 6"));
    bool row_colored = got == 6;
    if (colored && *colored != row_colored)
      throw IoError(cat("cloud: ", path, " line ", lineno,
                        " mixes colored and colorless rows"));
    colored = row_colored;
    rows.push_back(vals);
  }
  if (rows.empty()) throw IoError(cat("cloud: ", path, " holds no points"));
  Cloud<S> cloud;
  cloud.pos.resize(Eigen::Index(rows.size()), 3);
  if (*colored) cloud.color.resize(Eigen::Index(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int a = 0; a < 3; ++a) cloud.pos(Eigen::Index(i), a) = S(rows[i][a]);
    if (*colored)
      for (int a = 0; a < 3; ++a)
        cloud.color(Eigen::Index(i), a) = S(rows[i][3 + a]);
  }
  return cloud;
}

// sniff the magic, parse either format, then canonicalize onto the unit ball
template <class S>
Cloud<S> load_cloud(const std::string& path) {
  char magic[4] = {};
  {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(cat("cloud: cannot open ", path));
    is.read(magic, 4);
  }
  Cloud<S> cloud = std::memcmp(magic, "PFPC", 4) == 0 ? load_cloud_binary<S>(path)
                                                      : load_cloud_text<S>(path);
  normalize_to_unit_ball(cloud.pos);
  return cloud;
}

// ---- teacher feature files ----

template <class S>
void save_teacher(const std::string& path, const MatRM<S>& feats) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError(cat("teacher: cannot open ", path, " for writing"));
  os.write("PFTF", 4);
  std::uint64_t m = std::uint64_t(feats.rows()), d = std::uint64_t(feats.cols());
  os.write(reinterpret_cast<const char*>(&m), 8);
  os.write(reinterpret_cast<const char*>(&d), 8);
  for (Eigen::Index i = 0; i < feats.rows(); ++i)
    for (Eigen::Index j = 0; j < feats.cols(); ++j) {
      float v = float(feats(i, j));
      os.write(reinterpret_cast<const char*>(&v), 4);
    }
}

template <class S>
MatRM<S> load_teacher(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(cat("teacher: cannot open ", path));
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PFTF", 4) != 0)
    throw IoError(cat("teacher: ", path, " lacks PFTF magic"));
  std::uint64_t m{}, d{};
  is.read(reinterpret_cast<char*>(&m), 8);
  is.read(reinterpret_cast<char*>(&d), 8);
  if (!is) throw IoError(cat("teacher: truncated header in ", path));
  MatRM<S> out;
  out.resize(Eigen::Index(m), Eigen::Index(d));
  for (std::uint64_t i = 0; i < m; ++i)
    for (std::uint64_t j = 0; j < d; ++j) {
      float v{};
      is.read(reinterpret_cast<char*>(&v), 4);
      out(Eigen::Index(i), Eigen::Index(j)) = S(v);
    }
  if (!is) throw IoError(cat("teacher: truncated payload in ", path));
  return out;
}

// ---- dataset assembly ----

struct DatasetConfig {
  std::size_t count = 256;
  std::size_t n_points = 512;
  double sigma = 0.005;
  double composite_fraction = 0.3;
  std::uint64_t seed = 42;
};

template <class S>
struct Sample {
  ShapeSpec spec;
  Cloud<S> cloud;
  std::string caption;
  std::vector<QaPair> qa;
};

template <class S>
Sample<S> make_sample(const DatasetConfig& cfg, std::uint64_t seed,
                      std::size_t index) {
  Rng root(seed);
  Rng spec_rng = root.fork("spec", index);
  Sample<S> s;
  s.spec = sample_spec(spec_rng, cfg.composite_fraction);
  s.cloud = generate<S>(s.spec, cfg.n_points, cfg.sigma, root.fork("points", index));
  s.caption = caption(s.spec);
  s.qa = qa_pairs(s.spec);
  return s;
}

inline std::size_t worker_count(std::size_t jobs) {
  std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PF_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    check(end != env && v > 0, cat("PF_THREADS: bad value '", env, "'"));
    hw = std::size_t(v);
  }
  return std::max<std::size_t>(1, std::min(hw, jobs));
}

// samples are functions of (seed, index) alone, so any worker count
// yields the same dataset
template <class S>
std::vector<Sample<S>> build_dataset(const DatasetConfig& cfg) {
  std::vector<Sample<S>> samples(cfg.count);
  std::size_t workers = worker_count(cfg.count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < cfg.count; ++i)
      samples[i] = make_sample<S>(cfg, cfg.seed, i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < cfg.count; i += workers)
          samples[i] = make_sample<S>(cfg, cfg.seed, i);
      });
    for (auto& t : pool) t.join();
  }
  return samples;
}

inline nlohmann::ordered_json spec_json(const ShapeSpec& spec) {
  nlohmann::ordered_json parts = nlohmann::ordered_json::array();
  for (const auto& p : spec.parts)
    parts.push_back({{"family", family_word(p.family)},
                     {"color", p.color},
                     {"size", p.size}});
  return {{"parts", parts},
          {"relation", spec.relation == Relation::None
                           ? "none"
                           : (spec.relation == Relation::LeftOf ? "left_of"
                                                                : "above")}};
}

}  // namespace pf
