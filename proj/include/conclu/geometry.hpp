#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace conclu::geom {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

struct PointCloud {
  Points points;
  std::optional<int> label;
  // Per-point integer labels (e.g. blob id), empty when unknown.
  std::vector<int> part_labels;

  std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
};

struct AugmentConfig {
  double keep_fraction = 0.85;
  // Number of points after the crop resample; 0 keeps the input size.
  std::size_t out_points = 0;
  double max_angle_deg = 5.0;
  double jitter_sigma = 0.01;
  double jitter_clip = 0.025;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class ShapeKind { kSphere, kBox, kPlane, kCylinder, kTwoBlobs };

ShapeKind parse_shape_kind(const std::string& name);
std::string to_string(ShapeKind kind);

// Standard deviation of each blob and the distance between blob centers, in
// units of that deviation.
inline constexpr double kBlobSigma = 0.1;
inline constexpr double kBlobSeparation = 8.0;

PointCloud generate_shape(ShapeKind kind, std::size_t n, std::uint64_t seed);

PointCloud normalize_cloud(const PointCloud& pc);

PointCloud random_crop(const PointCloud& pc, const AugmentConfig& cfg, std::uint64_t seed);
// The half-space direction random_crop draws for `seed`.
Eigen::Vector3d crop_direction(std::uint64_t seed);
PointCloud random_rotation(const PointCloud& pc, const AugmentConfig& cfg, std::uint64_t seed);
PointCloud random_jitter(const PointCloud& pc, const AugmentConfig& cfg, std::uint64_t seed);

// crop -> rotate -> jitter, twice, from independent sub-seeds of `seed`.
std::pair<PointCloud, PointCloud> make_views(const PointCloud& pc, const AugmentConfig& cfg,
                                             std::uint64_t seed);

// Rz * Ry * Rx for the given angles in radians.
Eigen::Matrix3d rotation_zyx(double z, double y, double x);

void save_xyz(const PointCloud& pc, const std::filesystem::path& path);
PointCloud load_xyz(const std::filesystem::path& path);

struct Mesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<std::size_t, 3>> triangles;
};

// ASCII OFF; polygons with more than three vertices are fan-triangulated.
Mesh read_off(const std::filesystem::path& path);
PointCloud sample_mesh(const Mesh& mesh, std::size_t n, std::uint64_t seed);
PointCloud load_off(const std::filesystem::path& path, std::size_t n, std::uint64_t seed);

}  // namespace conclu::geom
