#include "conclu/geometry.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Geometry>

#include "conclu/errors.hpp"
#include "conclu/rng.hpp"

namespace conclu::geom {

namespace {

Eigen::Vector3d random_unit_vector(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    Eigen::Vector3d v(normal(rng), normal(rng), normal(rng));
    const double n = v.norm();
    if (n > 1e-12) return v / n;
  }
}

PointCloud with_rows(const PointCloud& pc, const std::vector<std::size_t>& rows) {
  PointCloud out;
  out.label = pc.label;
  out.points.resize(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.points.row(static_cast<Eigen::Index>(i)) = pc.points.row(static_cast<Eigen::Index>(rows[i]));
  }
  if (!pc.part_labels.empty()) {
    out.part_labels.reserve(rows.size());
    for (std::size_t r : rows) out.part_labels.push_back(pc.part_labels[r]);
  }
  return out;
}

// Samples a point on one of the faces of an axis-aligned box with the given
// half extents, faces chosen proportionally to area.
Eigen::Vector3d sample_box_surface(const Eigen::Vector3d& half, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const std::array<double, 3> face_area{half.y() * half.z(), half.x() * half.z(),
                                        half.x() * half.y()};
  const double total = face_area[0] + face_area[1] + face_area[2];
  std::uniform_real_distribution<double> pick(0.0, total);
  const double u = pick(rng);
  const int axis = u < face_area[0] ? 0 : (u < face_area[0] + face_area[1] ? 1 : 2);
  Eigen::Vector3d p(unit(rng) * half.x(), unit(rng) * half.y(), unit(rng) * half.z());
  p[axis] = (unit(rng) < 0.0 ? -1.0 : 1.0) * half[axis];
  return p;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

template <typename T>
bool parse_number(const std::string& tok, T& out) {
  const char* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

void AugmentConfig::validate() const {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ConfigError("keep_fraction must lie in (0, 1], got " + std::to_string(keep_fraction));
  }
  if (!(jitter_clip >= 0.0)) throw ConfigError("jitter_clip must be >= 0");
  if (!(jitter_sigma >= 0.0)) throw ConfigError("jitter_sigma must be >= 0");
  if (!(max_angle_deg >= 0.0)) throw ConfigError("max_angle_deg must be >= 0");
}

ShapeKind parse_shape_kind(const std::string& name) {
  if (name == "sphere") return ShapeKind::kSphere;
  if (name == "box") return ShapeKind::kBox;
  if (name == "plane") return ShapeKind::kPlane;
  if (name == "cylinder") return ShapeKind::kCylinder;
  if (name == "two_blobs") return ShapeKind::kTwoBlobs;
  throw ConfigError("unknown shape kind '" + name + "'");
}

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kSphere: return "sphere";
    case ShapeKind::kBox: return "box";
    case ShapeKind::kPlane: return "plane";
    case ShapeKind::kCylinder: return "cylinder";
    case ShapeKind::kTwoBlobs: return "two_blobs";
  }
  return "unknown";
}

PointCloud generate_shape(ShapeKind kind, std::size_t n, std::uint64_t seed) {
  if (n < 8) throw ConfigError("generate_shape needs n >= 8, got " + std::to_string(n));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  PointCloud pc;
  pc.points.resize(static_cast<Eigen::Index>(n), 3);

  switch (kind) {
    case ShapeKind::kSphere: {
      // Antithetic pairs (and one balanced triple for odd n) keep the sample
      // centroid at the center, so normalization preserves the radius.
      std::size_t i = 0;
      if (n % 2 == 1) {
        const Eigen::Vector3d p = random_unit_vector(rng);
        const Eigen::Vector3d u = p.unitOrthogonal();
        const Eigen::Vector3d v = p.cross(u);
        const double turn = angle(rng);
        const Eigen::Vector3d w = std::cos(turn) * u + std::sin(turn) * v;
        const double h = std::sqrt(3.0) / 2.0;
        pc.points.row(0) = p.transpose();
        pc.points.row(1) = (-0.5 * p + h * w).transpose();
        pc.points.row(2) = (-0.5 * p - h * w).transpose();
        i = 3;
      }
      for (; i < n; i += 2) {
        const Eigen::Vector3d p = random_unit_vector(rng);
        pc.points.row(static_cast<Eigen::Index>(i)) = p.transpose();
        pc.points.row(static_cast<Eigen::Index>(i + 1)) = -p.transpose();
      }
      break;
    }
    case ShapeKind::kBox: {
      const Eigen::Vector3d half(1.0, 0.75, 0.5);
      for (std::size_t i = 0; i < n; ++i) pc.points.row(i) = sample_box_surface(half, rng).transpose();
      break;
    }
    case ShapeKind::kPlane:
      for (std::size_t i = 0; i < n; ++i) pc.points.row(i) << unit(rng), unit(rng), 0.0;
      break;
    case ShapeKind::kCylinder: {
      constexpr double radius = 0.6, half_height = 1.0;
      const double side = 2.0 * std::numbers::pi * radius * 2.0 * half_height;
      const double cap = std::numbers::pi * radius * radius;
      std::uniform_real_distribution<double> pick(0.0, side + 2.0 * cap);
      std::uniform_real_distribution<double> u01(0.0, 1.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double u = pick(rng);
        const double t = angle(rng);
        if (u < side) {
          pc.points.row(i) << radius * std::cos(t), radius * std::sin(t), half_height * unit(rng);
        } else {
          // Uniform on a disc: radius ~ sqrt(U).
          const double r = radius * std::sqrt(u01(rng));
          const double z = u < side + cap ? half_height : -half_height;
          pc.points.row(i) << r * std::cos(t), r * std::sin(t), z;
        }
      }
      break;
    }
    case ShapeKind::kTwoBlobs: {
      std::normal_distribution<double> normal(0.0, kBlobSigma);
      const double offset = 0.5 * kBlobSeparation * kBlobSigma;
      pc.part_labels.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const int blob = i < n / 2 ? 0 : 1;
        const double cx = blob == 0 ? -offset : offset;
        pc.points.row(i) << cx + normal(rng), normal(rng), normal(rng);
        pc.part_labels[i] = blob;
      }
      break;
    }
  }
  return pc;
}

PointCloud normalize_cloud(const PointCloud& pc) {
  if (pc.size() == 0) throw EmptyInputError("normalize_cloud: empty cloud");
  if (!pc.points.allFinite()) throw NumericError("normalize_cloud: non-finite coordinates");
  PointCloud out = pc;
  const Eigen::RowVector3d centroid = pc.points.colwise().mean();
  out.points.rowwise() -= centroid;
  const double max_norm = out.points.rowwise().norm().maxCoeff();
  if (!(max_norm > 0.0)) {
    throw DegenerateError("normalize_cloud: all points coincide");
  }
  out.points /= max_norm;
  return out;
}

Eigen::Vector3d crop_direction(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_unit_vector(rng);
}

PointCloud random_crop(const PointCloud& pc, const AugmentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t n = pc.size();
  if (static_cast<double>(n) * cfg.keep_fraction < 4.0) {
    throw DegenerateError("random_crop: " + std::to_string(n) + " points at keep fraction " +
                          std::to_string(cfg.keep_fraction) + " leave fewer than 4 survivors");
  }
  // The 1e-9 guards against products like 0.85 * 100 landing a hair above an
  // integer.
  const auto keep = static_cast<std::size_t>(
      std::ceil(cfg.keep_fraction * static_cast<double>(n) - 1e-9));

  std::mt19937_64 rng(seed);
  const Eigen::Vector3d s = random_unit_vector(rng);
  std::vector<double> proj(n);
  for (std::size_t i = 0; i < n; ++i) proj[i] = pc.points.row(i).dot(s);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return proj[a] < proj[b]; });
  std::vector<std::size_t> survivors(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
  std::sort(survivors.begin(), survivors.end());

  const std::size_t target = cfg.out_points == 0 ? n : cfg.out_points;
  if (target == survivors.size()) return with_rows(pc, survivors);

  std::uniform_int_distribution<std::size_t> pick(0, survivors.size() - 1);
  std::vector<std::size_t> rows(target);
  for (auto& r : rows) r = survivors[pick(rng)];
  return with_rows(pc, rows);
}

Eigen::Matrix3d rotation_zyx(double z, double y, double x) {
  const Eigen::Matrix3d rz = Eigen::AngleAxisd(z, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  const Eigen::Matrix3d ry = Eigen::AngleAxisd(y, Eigen::Vector3d::UnitY()).toRotationMatrix();
  const Eigen::Matrix3d rx = Eigen::AngleAxisd(x, Eigen::Vector3d::UnitX()).toRotationMatrix();
  return rz * ry * rx;
}

PointCloud random_rotation(const PointCloud& pc, const AugmentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const double max_rad = cfg.max_angle_deg * std::numbers::pi / 180.0;
  std::uniform_real_distribution<double> angle(-max_rad, max_rad);
  const double az = max_rad > 0.0 ? angle(rng) : 0.0;
  const double ay = max_rad > 0.0 ? angle(rng) : 0.0;
  const double ax = max_rad > 0.0 ? angle(rng) : 0.0;
  PointCloud out = pc;
  if (max_rad > 0.0) out.points = pc.points * rotation_zyx(az, ay, ax).transpose();
  return out;
}

PointCloud random_jitter(const PointCloud& pc, const AugmentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  PointCloud out = pc;
  if (cfg.jitter_sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, cfg.jitter_sigma);
  for (Eigen::Index i = 0; i < out.points.rows(); ++i)
    for (Eigen::Index k = 0; k < 3; ++k)
      out.points(i, k) += std::clamp(noise(rng), -cfg.jitter_clip, cfg.jitter_clip);
  return out;
}

std::pair<PointCloud, PointCloud> make_views(const PointCloud& pc, const AugmentConfig& cfg,
                                             std::uint64_t seed) {
  auto view = [&](std::uint64_t base) {
    PointCloud v = random_crop(pc, cfg, mix_seed(seed, base));
    v = random_rotation(v, cfg, mix_seed(seed, base + 1));
    return random_jitter(v, cfg, mix_seed(seed, base + 2));
  };
  return {view(0), view(3)};
}

void save_xyz(const PointCloud& pc, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  const bool parts = !pc.part_labels.empty();
  char buf[128];
  for (std::size_t i = 0; i < pc.size(); ++i) {
    int len = std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g", pc.points(i, 0), pc.points(i, 1),
                            pc.points(i, 2));
    os.write(buf, len);
    if (parts) os << ' ' << pc.part_labels[i];
    os << '\n';
  }
  if (!os) throw Error("failed writing '" + path.string() + "'");
}

PointCloud load_xyz(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open '" + path.string() + "'");
  std::vector<double> coords;
  std::vector<int> parts;
  std::optional<bool> has_parts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto toks = split_ws(t);
    if (toks.size() != 3 && toks.size() != 4) {
      throw ParseError("expected 'x y z [part_label]', got " + std::to_string(toks.size()) +
                           " fields",
                       lineno);
    }
    const bool four = toks.size() == 4;
    if (has_parts && *has_parts != four) {
      throw ParseError("inconsistent column count", lineno);
    }
    has_parts = four;
    for (int k = 0; k < 3; ++k) {
      double v = 0.0;
      if (!parse_number(toks[k], v) || !std::isfinite(v)) {
        throw ParseError("bad coordinate '" + toks[k] + "'", lineno);
      }
      coords.push_back(v);
    }
    if (four) {
      int label = 0;
      if (!parse_number(toks[3], label)) {
        throw ParseError("bad part label '" + toks[3] + "'", lineno);
      }
      parts.push_back(label);
    }
  }
  if (coords.empty()) throw EmptyInputError("'" + path.string() + "' contains no points");
  PointCloud pc;
  const auto n = static_cast<Eigen::Index>(coords.size() / 3);
  pc.points = Eigen::Map<const Points>(coords.data(), n, 3);
  pc.part_labels = std::move(parts);
  return pc;
}

Mesh read_off(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open '" + path.string() + "'");
  std::string line;
  std::size_t lineno = 0;
  // Next non-empty, non-comment line, split into tokens.
  auto next = [&]() -> std::vector<std::string> {
    while (std::getline(is, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      return split_ws(t);
    }
    throw ParseError("unexpected end of OFF file", lineno);
  };

  auto header = next();
  if (header.empty() || header[0].rfind("OFF", 0) != 0) {
    throw ParseError("missing OFF header", lineno);
  }
  // Some exporters glue the counts onto the header ("OFF490 518 0").
  std::vector<std::string> counts;
  if (header[0].size() > 3) counts.push_back(header[0].substr(3));
  counts.insert(counts.end(), header.begin() + 1, header.end());
  if (counts.empty()) counts = next();
  std::size_t nv = 0, nf = 0;
  if (counts.size() < 2 || !parse_number(counts[0], nv) || !parse_number(counts[1], nf)) {
    throw ParseError("bad OFF counts line", lineno);
  }

  Mesh mesh;
  mesh.vertices.reserve(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    auto toks = next();
    Eigen::Vector3d v;
    if (toks.size() < 3) throw ParseError("vertex needs 3 coordinates", lineno);
    for (int k = 0; k < 3; ++k) {
      if (!parse_number(toks[k], v[k])) throw ParseError("bad vertex coordinate", lineno);
    }
    mesh.vertices.push_back(v);
  }
  for (std::size_t f = 0; f < nf; ++f) {
    auto toks = next();
    std::size_t k = 0;
    if (toks.empty() || !parse_number(toks[0], k) || k < 3 || toks.size() < k + 1) {
      throw ParseError("bad face record", lineno);
    }
    std::vector<std::size_t> idx(k);
    for (std::size_t j = 0; j < k; ++j) {
      if (!parse_number(toks[j + 1], idx[j]) || idx[j] >= nv) {
        throw ParseError("bad face vertex index", lineno);
      }
    }
    for (std::size_t j = 1; j + 1 < k; ++j) mesh.triangles.push_back({idx[0], idx[j], idx[j + 1]});
  }
  return mesh;
}

PointCloud sample_mesh(const Mesh& mesh, std::size_t n, std::uint64_t seed) {
  std::vector<double> cumulative;
  cumulative.reserve(mesh.triangles.size());
  double total = 0.0;
  for (const auto& t : mesh.triangles) {
    const Eigen::Vector3d& a = mesh.vertices[t[0]];
    const Eigen::Vector3d& b = mesh.vertices[t[1]];
    const Eigen::Vector3d& c = mesh.vertices[t[2]];
    total += 0.5 * (b - a).cross(c - a).norm();
    cumulative.push_back(total);
  }
  if (!(total > 0.0)) throw DegenerateError("mesh has zero surface area");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pick(0.0, total);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  PointCloud pc;
  pc.points.resize(static_cast<Eigen::Index>(n), 3);
  for (std::size_t i = 0; i < n; ++i) {
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick(rng));
    if (it == cumulative.end()) --it;
    const auto& t = mesh.triangles[static_cast<std::size_t>(it - cumulative.begin())];
    const double r1 = std::sqrt(u01(rng));
    const double r2 = u01(rng);
    const Eigen::Vector3d p = (1.0 - r1) * mesh.vertices[t[0]] + r1 * (1.0 - r2) * mesh.vertices[t[1]] +
                              r1 * r2 * mesh.vertices[t[2]];
    pc.points.row(static_cast<Eigen::Index>(i)) = p.transpose();
  }
  return pc;
}

PointCloud load_off(const std::filesystem::path& path, std::size_t n, std::uint64_t seed) {
  return sample_mesh(read_off(path), n, seed);
}

}  // namespace conclu::geom
