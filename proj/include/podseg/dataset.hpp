#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "podseg/cloud.hpp"

namespace podseg {

// ---- synthetic plants -----------------------------------------------------------------

struct PlantSpec {
  int tillers_min = 3, tillers_max = 4;
  int siliques_min = 4, siliques_max = 7;  // per carrier (each tiller and the stem top)
  double silique_length_min = 0.045, silique_length_max = 0.07;
  double silique_radius_min = 0.0018, silique_radius_max = 0.0025;
  double stem_height = 0.9;
  double stem_radius = 0.002;
  double tiller_radius = 0.0015;
  double tiller_length_min = 0.2, tiller_length_max = 0.3;
  double spacing = 0.0025;  // surface sample spacing; density is 1 / spacing^2
  double jitter = 0.0002;
  double min_centroid_gap = 0.022;  // between silique centroids
  double min_surface_gap = 0.012;   // between silique surfaces
  std::uint64_t seed = 1;

  void validate() const {
    auto range = [](double lo, double hi, const char* what) {
      if (!(lo > 0) || !(hi >= lo)) throw std::invalid_argument(std::string("plant spec: bad range for ") + what);
    };
    range(tillers_min, tillers_max, "tillers");
    range(siliques_min, siliques_max, "siliques");
    range(silique_length_min, silique_length_max, "silique_length");
    range(silique_radius_min, silique_radius_max, "silique_radius");
    range(tiller_length_min, tiller_length_max, "tiller_length");
    for (double v : {stem_height, stem_radius, tiller_radius, spacing, min_centroid_gap, min_surface_gap})
      if (!(v > 0)) throw std::invalid_argument("plant spec: lengths must be positive");
    if (jitter < 0) throw std::invalid_argument("plant spec: jitter must be >= 0");
    if (silique_radius_max * 8 > silique_length_min) throw std::invalid_argument("plant spec: siliques must be slim");
    if (stem_height > 0.95) throw std::invalid_argument("plant spec: plant must fit the unit cube");
  }
};

// Cylinder from a to b; capsules add hemispherical caps of the same radius.
struct Tube {
  Vec3 a{}, b{};
  double radius = 0;
  bool capped = false;
  int sem = kNonSilique;
  int inst = kNoInstance;

  double length() const {
    double s = 0;
    for (int k = 0; k < 3; ++k) s += (b[k] - a[k]) * (b[k] - a[k]);
    return std::sqrt(s);
  }
  Vec3 centroid() const { return {(a[0] + b[0]) / 2, (a[1] + b[1]) / 2, (a[2] + b[2]) / 2}; }
};

struct PlantModel {
  std::vector<Tube> tubes;
  int num_siliques = 0;
};

namespace geom {

inline Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 mul(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 unit(const Vec3& a) { return mul(a, 1.0 / norm(a)); }

// Two unit vectors orthogonal to d and to each other.
inline std::pair<Vec3, Vec3> frame(const Vec3& d) {
  const Vec3 ref = std::abs(d[2]) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
  const Vec3 u = unit(cross(d, ref));
  return {u, cross(d, u)};
}

// Distance between segments p0-p1 and q0-q1.
inline double segment_distance(const Vec3& p0, const Vec3& p1, const Vec3& q0, const Vec3& q1) {
  const Vec3 d1 = sub(p1, p0), d2 = sub(q1, q0), r = sub(p0, q0);
  const double a = dot(d1, d1), e = dot(d2, d2), f = dot(d2, r);
  double s = 0, t = 0;
  if (a <= 1e-300 && e <= 1e-300) return norm(r);
  if (a <= 1e-300) {
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = dot(d1, r);
    if (e <= 1e-300) {
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = dot(d1, d2), den = a * e - b * b;
      s = den > 1e-300 ? std::clamp((b * f - c * e) / den, 0.0, 1.0) : 0.0;
      t = (b * s + f) / e;
      if (t < 0) {
        t = 0;
        s = std::clamp(-c / a, 0.0, 1.0);
      } else if (t > 1) {
        t = 1;
        s = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  return norm(sub(add(p0, mul(d1, s)), add(q0, mul(d2, t))));
}

}  // namespace geom

// Lays out stem, tillers and siliques. Siliques hang off the tillers and the
// top of the stem; placements violating the centroid or surface gaps are
// redrawn.
inline PlantModel build_plant(const PlantSpec& spec) {
  spec.validate();
  using namespace geom;
  std::mt19937_64 rng(spec.seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto uint_in = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  PlantModel m;

  // stem: noisy vertical polyline
  const int segments = 8;
  std::vector<Vec3> stem{{0.5, 0.5, 0.03}};
  for (int k = 1; k <= segments; ++k) {
    const Vec3& prev = stem.back();
    stem.push_back({prev[0] + uni(-0.006, 0.006), prev[1] + uni(-0.006, 0.006), 0.03 + spec.stem_height * k / segments});
  }
  for (int k = 0; k < segments; ++k) m.tubes.push_back({stem[k], stem[k + 1], spec.stem_radius, false});
  auto stem_at = [&](double frac) {
    const double x = frac * segments;
    const int k = std::min(segments - 1, static_cast<int>(x));
    return add(stem[k], mul(sub(stem[k + 1], stem[k]), x - k));
  };

  struct Carrier {
    Vec3 a, b;
    double radius;
    double t_lo;
  };
  std::vector<Carrier> carriers;
  const int tillers = uint_in(spec.tillers_min, spec.tillers_max);
  const double az0 = uni(0, 2 * std::numbers::pi);
  for (int t = 0; t < tillers; ++t) {
    const double frac = 0.35 + 0.4 * (t + uni(0.1, 0.9)) / tillers;
    const double az = az0 + 2 * std::numbers::pi * t / tillers + uni(-0.3, 0.3);
    const double tilt = uni(0.45, 0.8);  // from vertical
    const Vec3 dir{std::sin(tilt) * std::cos(az), std::sin(tilt) * std::sin(az), std::cos(tilt)};
    const Vec3 a = stem_at(frac);
    const Vec3 b = add(a, mul(dir, uni(spec.tiller_length_min, spec.tiller_length_max)));
    m.tubes.push_back({a, b, spec.tiller_radius, false});
    carriers.push_back({a, b, spec.tiller_radius, 0.35});
  }
  carriers.push_back({stem_at(0.8), stem.back(), spec.stem_radius, 0.2});

  std::vector<std::size_t> placed;
  for (const auto& c : carriers) {
    const int count = uint_in(spec.siliques_min, spec.siliques_max);
    const Vec3 cd = unit(sub(c.b, c.a));
    const auto [u, v] = frame(cd);
    for (int s = 0; s < count; ++s) {
      bool ok = false;
      for (int attempt = 0; attempt < 400 && !ok; ++attempt) {
        const double len = uni(spec.silique_length_min, spec.silique_length_max);
        const double rad = uni(spec.silique_radius_min, spec.silique_radius_max);
        const double phi = uni(0, 2 * std::numbers::pi);
        const Vec3 w = add(mul(u, std::cos(phi)), mul(v, std::sin(phi)));
        const double alpha = uni(0.45, 1.0);
        const Vec3 d = unit(add(mul(cd, std::cos(alpha)), mul(w, std::sin(alpha))));
        const Vec3 base = add(add(c.a, mul(sub(c.b, c.a), uni(c.t_lo, 0.97))), mul(w, c.radius + rad + 0.002));
        Tube tube{add(base, mul(d, rad)), add(base, mul(d, len - rad)), rad, true, kSilique, m.num_siliques};
        bool inside = true;
        for (const Vec3& p : {tube.a, tube.b})
          for (int k = 0; k < 3; ++k) inside &= p[k] - rad > 0.01 && p[k] + rad < 0.99;
        if (!inside) continue;
        ok = true;
        for (auto j : placed) {
          const Tube& o = m.tubes[j];
          if (norm(sub(tube.centroid(), o.centroid())) < spec.min_centroid_gap ||
              segment_distance(tube.a, tube.b, o.a, o.b) - rad - o.radius < spec.min_surface_gap) {
            ok = false;
            break;
          }
        }
        if (ok) {
          placed.push_back(m.tubes.size());
          m.tubes.push_back(tube);
          ++m.num_siliques;
        }
      }
      if (!ok) throw std::runtime_error("plant spec: cannot place silique " + std::to_string(m.num_siliques));
    }
  }
  return m;
}

// Closed-form lateral (plus cap) area of a tube.
inline double surface_area(const Tube& t) {
  const double side = 2 * std::numbers::pi * t.radius * t.length();
  return t.capped ? side + 4 * std::numbers::pi * t.radius * t.radius : side;
}

// Stratified surface samples at roughly one point per spacing^2: rings along
// the axis with staggered angles, Fibonacci points on the caps.
inline LabeledCloud sample_plant(const PlantModel& model, const PlantSpec& spec, const std::string& id = {}) {
  using namespace geom;
  std::mt19937_64 rng(spec.seed ^ 0xa5a5a5a5deadbeefULL);
  std::normal_distribution<double> noise(0.0, spec.jitter);
  LabeledCloud c;
  c.id = id;
  c.sem.emplace();
  c.inst.emplace();
  const double s = spec.spacing;
  auto emit = [&](const Vec3& p, const Tube& t) {
    c.coords.push_back({p[0] + noise(rng), p[1] + noise(rng), p[2] + noise(rng)});
    c.sem->push_back(t.sem);
    c.inst->push_back(t.inst);
  };
  for (const auto& t : model.tubes) {
    const double len = t.length();
    const Vec3 d = unit(sub(t.b, t.a));
    const auto [u, v] = frame(d);
    const double circ = 2 * std::numbers::pi * t.radius;
    const int n_theta = std::max(3, static_cast<int>(std::lround(circ / s)));
    const double ring_step = s * s * n_theta / circ;
    const int n_rings = std::max(1, static_cast<int>(std::lround(len / ring_step)));
    const double phase = std::uniform_real_distribution<double>(0, 2 * std::numbers::pi)(rng);
    for (int k = 0; k < n_rings; ++k) {
      const Vec3 centre = add(t.a, mul(d, len * (k + 0.5) / n_rings));
      for (int j = 0; j < n_theta; ++j) {
        const double th = phase + 2 * std::numbers::pi * (j + 0.5 * (k % 2)) / n_theta;
        emit(add(centre, add(mul(u, t.radius * std::cos(th)), mul(v, t.radius * std::sin(th)))), t);
      }
    }
    if (!t.capped) continue;
    const int n_cap = std::max(1, static_cast<int>(std::lround(2 * std::numbers::pi * t.radius * t.radius / (s * s))));
    for (int end = 0; end < 2; ++end) {
      const Vec3 axis = end == 0 ? mul(d, -1) : d;
      const Vec3& centre = end == 0 ? t.a : t.b;
      for (int j = 0; j < n_cap; ++j) {
        const double h = (j + 0.5) / n_cap;  // uniform height on a hemisphere is uniform in area
        const double rr = std::sqrt(1 - h * h);
        const double th = phase + j * std::numbers::pi * (3 - std::sqrt(5.0));
        const Vec3 dir = add(mul(axis, h), add(mul(u, rr * std::cos(th)), mul(v, rr * std::sin(th))));
        emit(add(centre, mul(dir, t.radius)), t);
      }
    }
  }
  return c;
}

inline LabeledCloud generate_plant(const PlantSpec& spec, const std::string& id = {}) {
  return sample_plant(build_plant(spec), spec, id);
}

// ---- normalization --------------------------------------------------------------------

// p' = (p - origin) * scale
struct UnitCubeTransform {
  Vec3 origin{};
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const {
    return {(p[0] - origin[0]) * scale, (p[1] - origin[1]) * scale, (p[2] - origin[2]) * scale};
  }
  Vec3 invert(const Vec3& q) const { return {q[0] / scale + origin[0], q[1] / scale + origin[1], q[2] / scale + origin[2]}; }
};

// Isotropic scaling of the longest bounding-box side to 1, min corner to 0.
inline std::pair<LabeledCloud, UnitCubeTransform> normalize_unit_cube(const LabeledCloud& cloud) {
  const auto b = bounds_of(cloud.coords);
  double ext = 0;
  for (int a = 0; a < 3; ++a) ext = std::max(ext, b.max[a] - b.min[a]);
  if (!(ext > 0)) throw std::invalid_argument("normalize_unit_cube: zero-extent cloud");
  UnitCubeTransform t{b.min, 1.0 / ext};
  LabeledCloud out = cloud;
  for (auto& p : out.coords) p = t.apply(p);
  return {std::move(out), t};
}

// ---- text I/O -------------------------------------------------------------------------

class CloudFormatError : public std::runtime_error {
 public:
  CloudFormatError(const std::string& path, std::size_t line, const std::string& what)
      : std::runtime_error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline constexpr const char* kCloudMagic = "# podseg-cloud v1 columns=";

inline void append_double(std::string& out, double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, r.ptr);
}

inline std::string format_cloud(const LabeledCloud& cloud) {
  std::string out = kCloudMagic;
  out += "x,y,z";
  if (cloud.sem) out += ",sem";
  if (cloud.inst) out += ",inst";
  out += '\n';
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int a = 0; a < 3; ++a) {
      if (a) out += ' ';
      append_double(out, cloud.coords[i][a]);
    }
    if (cloud.sem) out += ' ' + std::to_string((*cloud.sem)[i]);
    if (cloud.inst) out += ' ' + std::to_string((*cloud.inst)[i]);
    out += '\n';
  }
  return out;
}

inline void write_cloud(const LabeledCloud& cloud, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << format_cloud(cloud);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline LabeledCloud parse_cloud(std::istream& is, const std::string& name = "<stream>") {
  LabeledCloud c;
  std::string line;
  std::size_t lineno = 0;
  bool has_sem = false, has_inst = false, header = false;
  std::size_t columns = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind(kCloudMagic, 0) == 0) {
        const std::string cols = line.substr(std::char_traits<char>::length(kCloudMagic));
        if (cols == "x,y,z") columns = 3;
        else if (cols == "x,y,z,sem") columns = 4, has_sem = true;
        else if (cols == "x,y,z,sem,inst") columns = 5, has_sem = has_inst = true;
        else if (cols == "x,y,z,inst") columns = 4, has_inst = true;
        else throw CloudFormatError(name, lineno, "unsupported columns '" + cols + "'");
        header = true;
      }
      continue;
    }
    const char* s = line.data();
    const char* end = s + line.size();
    std::vector<double> vals;
    std::vector<int> ints;
    std::size_t field = 0;
    while (true) {
      while (s < end && (*s == ' ' || *s == '\t' || *s == ',')) ++s;
      if (s == end) break;
      if (field < 3) {
        double v;
        auto r = std::from_chars(s, end, v);
        if (r.ec != std::errc() || (r.ptr != end && *r.ptr != ' ' && *r.ptr != '\t' && *r.ptr != ','))
          throw CloudFormatError(name, lineno, "non-numeric coordinate");
        if (!std::isfinite(v)) throw CloudFormatError(name, lineno, "non-finite coordinate");
        vals.push_back(v);
        s = r.ptr;
      } else {
        int v;
        auto r = std::from_chars(s, end, v);
        if (r.ec != std::errc() || (r.ptr != end && *r.ptr != ' ' && *r.ptr != '\t' && *r.ptr != ','))
          throw CloudFormatError(name, lineno, "non-integer label");
        ints.push_back(v);
        s = r.ptr;
      }
      ++field;
    }
    if (!header) {
      if (field < 3 || field > 5) throw CloudFormatError(name, lineno, "expected 3 to 5 columns");
      columns = field;
      has_sem = field >= 4;
      has_inst = field == 5;
      header = true;
    }
    if (field != columns)
      throw CloudFormatError(name, lineno, "expected " + std::to_string(columns) + " columns, got " + std::to_string(field));
    c.coords.push_back({vals[0], vals[1], vals[2]});
    std::size_t k = 0;
    if (has_sem) {
      if (!c.sem) c.sem.emplace();
      c.sem->push_back(ints[k++]);
    }
    if (has_inst) {
      if (!c.inst) c.inst.emplace();
      c.inst->push_back(ints[k++]);
    }
  }
  if (has_sem && !c.sem) c.sem.emplace();
  if (has_inst && !c.inst) c.inst.emplace();
  return c;
}

inline LabeledCloud read_cloud(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  auto c = parse_cloud(is, path);
  auto slash = path.find_last_of('/');
  std::string base = slash == std::string::npos ? path : path.substr(slash + 1);
  if (auto dot = base.rfind('.'); dot != std::string::npos) base = base.substr(0, dot);
  c.id = base;
  return c;
}

// ---- splits -----------------------------------------------------------------------------

enum class SplitMode { fixed, sixfold };

struct DatasetSplit {
  std::vector<std::string> ids;
  std::vector<std::size_t> train, val, test;  // fixed mode
  std::vector<std::vector<std::size_t>> folds;  // sixfold mode
};

// Fixed: the 40/9/6 proportions in id order. Sixfold: seeded shuffle dealt
// round-robin into six folds.
inline DatasetSplit make_splits(const std::vector<std::string>& ids, SplitMode mode, std::uint64_t seed = 0) {
  DatasetSplit s;
  s.ids = ids;
  const std::size_t n = ids.size();
  if (mode == SplitMode::fixed) {
    if (n < 3) throw std::invalid_argument("make_splits: fixed mode needs at least 3 ids");
    std::size_t n_train = static_cast<std::size_t>(std::lround(n * 40.0 / 55.0));
    std::size_t n_val = static_cast<std::size_t>(std::lround(n * 9.0 / 55.0));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 2);
    n_val = std::clamp<std::size_t>(n_val, 1, n - n_train - 1);
    for (std::size_t i = 0; i < n; ++i) (i < n_train ? s.train : i < n_train + n_val ? s.val : s.test).push_back(i);
  } else {
    if (n < 6) throw std::invalid_argument("make_splits: sixfold mode needs at least 6 ids");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    s.folds.resize(6);
    for (std::size_t k = 0; k < n; ++k) s.folds[k % 6].push_back(order[k]);
    for (auto& f : s.folds) std::sort(f.begin(), f.end());
  }
  return s;
}

}  // namespace podseg
