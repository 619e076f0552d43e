#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <Eigen/LU>

#include "doctest.h"

#include "conclu/errors.hpp"
#include "conclu/geometry.hpp"

using namespace conclu;
using namespace conclu::geom;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "conclu_test_geometry";
  fs::create_directories(dir);
  return dir / name;
}

PointCloud from_rows(std::initializer_list<std::array<double, 3>> rows) {
  PointCloud pc;
  pc.points.resize(static_cast<Eigen::Index>(rows.size()), 3);
  Eigen::Index i = 0;
  for (const auto& r : rows) pc.points.row(i++) << r[0], r[1], r[2];
  return pc;
}

AugmentConfig no_augment() {
  AugmentConfig cfg;
  cfg.keep_fraction = 1.0;
  cfg.max_angle_deg = 0.0;
  cfg.jitter_sigma = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("generate_shape") {
  SUBCASE("sphere radius after normalization") {
    for (std::size_t n : {1000, 999}) {
      const PointCloud pc = normalize_cloud(generate_shape(ShapeKind::kSphere, n, 1));
      const Eigen::VectorXd norms = pc.points.rowwise().norm();
      CHECK((norms.array() - 1.0).abs().maxCoeff() < 1e-9);
    }
  }
  SUBCASE("two blobs balanced and separated") {
    const PointCloud pc = generate_shape(ShapeKind::kTwoBlobs, 200, 2);
    REQUIRE(pc.part_labels.size() == 200);
    int ones = 0;
    for (int l : pc.part_labels) ones += l;
    CHECK(ones == 100);
    CHECK(kBlobSeparation >= 6.0);
  }
  SUBCASE("determinism") {
    CHECK(generate_shape(ShapeKind::kBox, 2048, 7).points ==
          generate_shape(ShapeKind::kBox, 2048, 7).points);
    CHECK(generate_shape(ShapeKind::kBox, 2048, 7).points !=
          generate_shape(ShapeKind::kBox, 2048, 8).points);
  }
  SUBCASE("every kind is finite with n points") {
    for (auto kind : {ShapeKind::kSphere, ShapeKind::kBox, ShapeKind::kPlane, ShapeKind::kCylinder,
                      ShapeKind::kTwoBlobs}) {
      const PointCloud pc = generate_shape(kind, 64, 3);
      CHECK(pc.size() == 64);
      CHECK(pc.points.allFinite());
      CHECK(parse_shape_kind(to_string(kind)) == kind);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(parse_shape_kind("torus"), ConfigError);
    CHECK_THROWS_AS(generate_shape(ShapeKind::kSphere, 7, 0), ConfigError);
  }
  SUBCASE("box surface") {
    const PointCloud pc = generate_shape(ShapeKind::kBox, 500, 4);
    const Eigen::Vector3d half(1.0, 0.75, 0.5);
    for (Eigen::Index i = 0; i < pc.points.rows(); ++i) {
      double closest = 1e9;
      for (int a = 0; a < 3; ++a) {
        CHECK(std::abs(pc.points(i, a)) <= half[a] + 1e-12);
        closest = std::min(closest, half[a] - std::abs(pc.points(i, a)));
      }
      CHECK(closest < 1e-12);
    }
  }
}

TEST_CASE("normalize_cloud") {
  const PointCloud n = normalize_cloud(from_rows({{1, 0, 0}, {3, 0, 0}}));
  CHECK(n.points(0, 0) == doctest::Approx(-1.0));
  CHECK(n.points(1, 0) == doctest::Approx(1.0));
  CHECK(n.points.col(1).cwiseAbs().maxCoeff() == 0.0);

  const PointCloud c = normalize_cloud(generate_shape(ShapeKind::kCylinder, 300, 5));
  CHECK(c.points.colwise().mean().norm() < 1e-9);
  CHECK(std::abs(c.points.rowwise().norm().maxCoeff() - 1.0) < 1e-9);
  CHECK((normalize_cloud(c).points - c.points).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(normalize_cloud(from_rows({{2, 2, 2}, {2, 2, 2}})), DegenerateError);
  CHECK_THROWS_AS(normalize_cloud(PointCloud{}), EmptyInputError);
}

TEST_CASE("random_crop") {
  const PointCloud pc = normalize_cloud(generate_shape(ShapeKind::kSphere, 100, 6));
  SUBCASE("full keep is the identity") {
    AugmentConfig cfg = no_augment();
    CHECK(random_crop(pc, cfg, 1).points == pc.points);
  }
  SUBCASE("survivor count over a grid") {
    for (std::size_t n : {20, 37, 100, 513}) {
      const PointCloud src = generate_shape(ShapeKind::kBox, n, n);
      for (double kf : {0.2, 0.5, 0.85, 0.9, 1.0}) {
        if (static_cast<double>(n) * kf < 4.0) continue;
        AugmentConfig cfg;
        cfg.keep_fraction = kf;
        cfg.out_points = 0;
        const std::size_t expected =
            static_cast<std::size_t>(std::ceil(kf * static_cast<double>(n) - 1e-9));
        // With out_points equal to the survivor count no resampling happens.
        cfg.out_points = expected;
        const PointCloud out = random_crop(src, cfg, 11);
        CHECK(out.size() == expected);
      }
    }
    AugmentConfig cfg;
    cfg.out_points = 85;
    CHECK(random_crop(pc, cfg, 3).size() == 85);
  }
  SUBCASE("survivors lie on the kept side of the half-space") {
    AugmentConfig cfg;
    cfg.out_points = 85;
    const PointCloud out = random_crop(pc, cfg, 9);
    const Eigen::Vector3d s = crop_direction(9);
    CHECK(std::abs(s.norm() - 1.0) < 1e-12);
    std::vector<bool> kept(pc.size(), false);
    for (Eigen::Index i = 0; i < out.points.rows(); ++i) {
      for (Eigen::Index k = 0; k < pc.points.rows(); ++k) {
        if (out.points.row(i) == pc.points.row(k)) kept[static_cast<std::size_t>(k)] = true;
      }
    }
    CHECK(std::count(kept.begin(), kept.end(), true) == 85);
    double max_kept = -1e9, min_dropped = 1e9;
    for (std::size_t k = 0; k < pc.size(); ++k) {
      const double proj = pc.points.row(static_cast<Eigen::Index>(k)).dot(s);
      if (kept[k]) max_kept = std::max(max_kept, proj);
      else min_dropped = std::min(min_dropped, proj);
    }
    CHECK(max_kept <= min_dropped);
  }
  SUBCASE("resampling restores a fixed size") {
    AugmentConfig cfg;
    cfg.out_points = 100;
    CHECK(random_crop(pc, cfg, 4).size() == 100);
    cfg.out_points = 0;
    CHECK(random_crop(pc, cfg, 4).size() == 100);
  }
  SUBCASE("too few survivors") {
    AugmentConfig cfg;
    cfg.keep_fraction = 0.3;
    CHECK_THROWS_AS(random_crop(from_rows({{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 1},
                                           {2, 0, 0}, {0, 2, 0}, {0, 0, 2}}),
                                cfg, 0),
                    DegenerateError);
  }
}

TEST_CASE("random_rotation") {
  const PointCloud pc = normalize_cloud(generate_shape(ShapeKind::kBox, 200, 12));
  AugmentConfig cfg;
  CHECK(random_rotation(pc, no_augment(), 3).points == pc.points);
  cfg.max_angle_deg = 45.0;
  const PointCloud r = random_rotation(pc, cfg, 3);
  CHECK(r.points == random_rotation(pc, cfg, 3).points);
  CHECK(r.points != pc.points);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < 200; i += 7) {
    CHECK(std::abs(r.points.row(i).norm() - pc.points.row(i).norm()) < 1e-12);
    for (Eigen::Index k = i + 1; k < 200; k += 11) {
      worst = std::max(worst, std::abs((r.points.row(i) - r.points.row(k)).norm() -
                                       (pc.points.row(i) - pc.points.row(k)).norm()));
    }
  }
  CHECK(worst < 1e-12);
  const Eigen::Matrix3d m = rotation_zyx(0.3, -0.2, 0.1);
  CHECK((m * m.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(std::abs(m.determinant() - 1.0) < 1e-14);
}

TEST_CASE("random_jitter") {
  const PointCloud pc = normalize_cloud(generate_shape(ShapeKind::kSphere, 400, 13));
  CHECK(random_jitter(pc, no_augment(), 5).points == pc.points);
  AugmentConfig cfg;
  const PointCloud j = random_jitter(pc, cfg, 5);
  // The displacement is re-measured after rounding the sum; allow one ulp.
  CHECK((j.points - pc.points).cwiseAbs().maxCoeff() <= cfg.jitter_clip + 1e-15);

  SUBCASE("empirical standard deviation") {
    PointCloud zeros;
    zeros.points = Points::Zero(100000 / 3 + 1, 3);
    const PointCloud noise = random_jitter(zeros, cfg, 17);
    const double n = static_cast<double>(noise.points.size());
    const double mean = noise.points.sum() / n;
    const double sd = std::sqrt((noise.points.array() - mean).square().sum() / n);
    // Clipping at 2.5 sigma removes about 3% of the variance.
    CHECK(std::abs(sd - 0.01) < 0.05 * 0.01);
  }
}

TEST_CASE("make_views") {
  const PointCloud pc = normalize_cloud(generate_shape(ShapeKind::kCylinder, 128, 14));
  {
    auto [a, b] = make_views(pc, no_augment(), 3);
    CHECK(a.points == pc.points);
    CHECK(b.points == pc.points);
  }
  AugmentConfig cfg;
  auto [a, b] = make_views(pc, cfg, 3);
  CHECK(a.points != b.points);
  CHECK(a.size() == 128);
  CHECK(b.size() == 128);
  auto [a2, b2] = make_views(pc, cfg, 3);
  CHECK(a.points == a2.points);
  CHECK(b.points == b2.points);
  auto [a3, b3] = make_views(pc, cfg, 4);
  CHECK(a3.points != a.points);
}

TEST_CASE("xyz round trip and errors") {
  PointCloud pc = generate_shape(ShapeKind::kTwoBlobs, 50, 15);
  const fs::path p = temp_path("blobs.xyz");
  save_xyz(pc, p);
  const PointCloud back = load_xyz(p);
  CHECK((back.points - pc.points).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(back.part_labels == pc.part_labels);

  pc.part_labels.clear();
  save_xyz(pc, p);
  CHECK(load_xyz(p).part_labels.empty());

  {
    std::ofstream(temp_path("bad.xyz")) << "1 2\n";
  }
  try {
    load_xyz(temp_path("bad.xyz"));
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 1);
  }
  {
    std::ofstream(temp_path("bad3.xyz")) << "1 2 3\n4 5 6\n7 x 9\n";
  }
  try {
    load_xyz(temp_path("bad3.xyz"));
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  {
    std::ofstream(temp_path("empty.xyz")) << "";
  }
  CHECK_THROWS_AS(load_xyz(temp_path("empty.xyz")), EmptyInputError);
  CHECK_THROWS_AS(load_xyz(temp_path("missing.xyz")), Error);
}

TEST_CASE("OFF meshes") {
  {
    std::ofstream(temp_path("square.off")) << "OFF\n4 2 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n3 0 1 2\n3 0 2 3\n";
  }
  const PointCloud sq = sample_mesh(read_off(temp_path("square.off")), 1000, 1);
  CHECK(sq.size() == 1000);
  CHECK(sq.points.col(0).minCoeff() >= 0.0);
  CHECK(sq.points.col(0).maxCoeff() <= 1.0);
  CHECK(sq.points.col(1).minCoeff() >= 0.0);
  CHECK(sq.points.col(1).maxCoeff() <= 1.0);
  CHECK(sq.points.col(2).cwiseAbs().maxCoeff() == 0.0);

  SUBCASE("area weighting") {
    // Triangle A has area 0.5, triangle B area 1.5; B should get 75%.
    {
      std::ofstream(temp_path("two.off"))
          << "OFF\n6 2 0\n0 0 0\n1 0 0\n0 1 0\n10 0 0\n13 0 0\n10 1 0\n3 0 1 2\n3 3 4 5\n";
    }
    const PointCloud pc = sample_mesh(read_off(temp_path("two.off")), 100000, 2);
    const double frac = static_cast<double>((pc.points.col(0).array() >= 5.0).count()) / 1e5;
    CHECK(std::abs(frac - 0.75) < 0.02);
  }
  SUBCASE("quad faces and glued header") {
    {
      std::ofstream(temp_path("quad.off")) << "OFF4 1 0\n0 0 0\n2 0 0\n2 2 0\n0 2 0\n4 0 1 2 3\n";
    }
    const PointCloud pc = load_off(temp_path("quad.off"), 200, 3);
    CHECK(pc.size() == 200);
    CHECK(pc.points.col(0).maxCoeff() <= 2.0);
  }
  SUBCASE("malformed") {
    {
      std::ofstream(temp_path("foo.off")) << "FOO\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
    }
    CHECK_THROWS_AS(read_off(temp_path("foo.off")), ParseError);
    {
      std::ofstream(temp_path("idx.off")) << "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n";
    }
    CHECK_THROWS_AS(read_off(temp_path("idx.off")), ParseError);
  }
}

TEST_CASE("augment config validation") {
  AugmentConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.keep_fraction = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.keep_fraction = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.jitter_clip = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.max_angle_deg = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
