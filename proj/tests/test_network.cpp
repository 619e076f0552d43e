#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"

#include "conclu/errors.hpp"
#include "conclu/network.hpp"

using namespace conclu;
using namespace conclu::net;

namespace {

NetworkConfig small_config(std::uint64_t seed = 1) {
  NetworkConfig cfg;
  cfg.encoder_widths = {3, 16, 32};
  cfg.head_widths = {32, 16, 8};
  cfg.num_prototypes = 8;
  cfg.proj_hidden = 16;
  cfg.proj_out = 8;
  cfg.pred_hidden = 4;
  cfg.seed = seed;
  return cfg;
}

geom::PointCloud uniform_cloud(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  geom::PointCloud pc;
  pc.points.resize(static_cast<Eigen::Index>(n), 3);
  for (Eigen::Index i = 0; i < pc.points.size(); ++i) pc.points.data()[i] = u(rng);
  return pc;
}

geom::PointCloud permute(const geom::PointCloud& pc, const std::vector<Eigen::Index>& perm) {
  geom::PointCloud out = pc;
  for (std::size_t r = 0; r < perm.size(); ++r) out.points.row(static_cast<Eigen::Index>(r)) = pc.points.row(perm[r]);
  return out;
}

std::vector<Eigen::Index> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<Eigen::Index> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

// Expected parameter count from widths alone: normalized layers carry a
// weight plus batch-norm scale and shift; only the predictor output layer
// has a bias instead.
std::size_t expected_count(const NetworkConfig& c) {
  auto normed = [](std::size_t in, std::size_t out) { return in * out + 2 * out; };
  auto biased = [](std::size_t in, std::size_t out) { return in * out + out; };
  std::size_t n = 0;
  for (std::size_t k = 1; k < c.encoder_widths.size(); ++k) n += normed(c.encoder_widths[k - 1], c.encoder_widths[k]);
  std::size_t in = c.feature_dim();
  for (auto w : c.head_widths) n += normed(in, w), in = w;
  n += normed(c.feature_dim(), c.proj_hidden) + normed(c.proj_hidden, c.proj_hidden) +
       normed(c.proj_hidden, c.proj_out);
  n += normed(c.proj_out, c.pred_hidden) + biased(c.pred_hidden, c.proj_out);
  return n;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(NetworkConfig{}.validate());
  auto bad = small_config();
  bad.head_widths = {32, 8};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_config();
  bad.head_widths.back() = 9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_config();
  bad.encoder_widths = {2, 16};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = small_config();
  bad.encoder_widths = {3, 0, 16};
  CHECK_THROWS_AS(init_model(bad), ConfigError);
  bad = small_config();
  bad.pred_hidden = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("initialization") {
  SUBCASE("fan-in bound") {
    auto cfg = small_config();
    cfg.encoder_widths = {3, 100, 50};
    const ModelState s = init_model(cfg);
    bool found = false;
    for (const auto& p : s.params) {
      if (p.name == "encoder.1.weight") {
        found = true;
        CHECK(p.value.shape() == diff::Shape{100, 50});
        CHECK(max_abs(p.value) <= 0.1);
        CHECK(max_abs(p.value) > 0.09);
      }
    }
    CHECK(found);
  }
  SUBCASE("every weight within its bound, batch norm identity") {
    const ModelState s = init_model(NetworkConfig{});
    for (const auto& p : s.params) {
      CAPTURE(p.name);
      if (p.name.ends_with(".weight")) {
        CHECK(max_abs(p.value) <= std::sqrt(1.0 / static_cast<double>(p.value.shape()[0])));
        CHECK(p.decay);
      } else if (p.name.ends_with(".bn_scale")) {
        CHECK(std::all_of(p.value.values().begin(), p.value.values().end(), [](double v) { return v == 1.0; }));
        CHECK_FALSE(p.decay);
      } else if (p.name.ends_with(".bn_shift")) {
        CHECK(max_abs(p.value) == 0.0);
        CHECK_FALSE(p.decay);
      }
      CHECK(max_abs(p.first_moment) == 0.0);
      CHECK(max_abs(p.second_moment) == 0.0);
    }
    for (const auto& b : s.buffers) {
      const double want = b.name.ends_with("running_var") ? 1.0 : 0.0;
      CHECK(std::all_of(b.value.values().begin(), b.value.values().end(), [&](double v) { return v == want; }));
    }
    CHECK(s.step == 0);
  }
  SUBCASE("determinism") {
    const ModelState a = init_model(small_config(5));
    const ModelState b = init_model(small_config(5));
    const ModelState c = init_model(small_config(6));
    REQUIRE(a.params.size() == b.params.size());
    bool all_equal = true, any_diff = false;
    for (std::size_t k = 0; k < a.params.size(); ++k) {
      all_equal = all_equal && a.params[k].value == b.params[k].value;
      any_diff = any_diff || !(a.params[k].value == c.params[k].value);
    }
    CHECK(all_equal);
    CHECK(any_diff);
  }
  SUBCASE("empty model mirrors the layout") {
    const ModelState a = init_model(small_config());
    const ModelState e = empty_model(small_config());
    REQUIRE(a.params.size() == e.params.size());
    for (std::size_t k = 0; k < a.params.size(); ++k) {
      CHECK(a.params[k].name == e.params[k].name);
      CHECK(a.params[k].value.shape() == e.params[k].value.shape());
    }
    CHECK(a.buffers.size() == e.buffers.size());
  }
}

TEST_CASE("parameter count") {
  CHECK(init_model(NetworkConfig{}).parameter_count() == 211648);
  CHECK(expected_count(NetworkConfig{}) == 211648);
  const auto cfg = small_config();
  CHECK(init_model(cfg).parameter_count() == expected_count(cfg));
  auto wide = NetworkConfig{};
  wide.proj_hidden = 1024;
  wide.proj_out = 256;
  wide.pred_hidden = 512;
  CHECK(init_model(wide).parameter_count() == expected_count(wide));
}

TEST_CASE("shapes and finiteness") {
  ModelState s = init_model(small_config());
  for (NormMode mode : {NormMode::kTrain, NormMode::kEval}) {
    diff::Tape tape;
    Forward fwd(tape, s, mode);
    const Var x = fwd.points(uniform_cloud(40, 3));
    const Var f = fwd.encode(x);
    CHECK(f.shape() == diff::Shape{40, 32});
    const Var g = fwd.class_logits(f);
    CHECK(g.shape() == diff::Shape{40, 8});
    const Var h = fwd.global_feature(f);
    const Var hh = diff::concat_rows(diff::stack_rows(std::vector<Var>{h}), diff::stack_rows(std::vector<Var>{h}));
    const Var z = fwd.project(hh);
    CHECK(z.shape() == diff::Shape{2, 8});
    const Var q = fwd.predict(z);
    CHECK(q.shape() == diff::Shape{2, 8});
    CHECK(f.value().all_finite());
    CHECK(g.value().all_finite());
    CHECK(q.value().all_finite());
    CHECK_THROWS_AS(fwd.class_logits(x), DimensionError);
    CHECK_THROWS_AS(fwd.project(g), DimensionError);
  }
  CHECK(s.all_finite());
}

TEST_CASE("batch-norm statistics") {
  ModelState s = init_model(small_config());
  const auto before = s.buffers;
  {
    diff::Tape tape;
    Forward fwd(tape, s, NormMode::kTrain, true, false);
    fwd.encode(fwd.points(uniform_cloud(20, 1)));
  }
  for (std::size_t k = 0; k < s.buffers.size(); ++k) CHECK(s.buffers[k].value == before[k].value);
  {
    diff::Tape tape;
    Forward fwd(tape, s, NormMode::kEval);
    fwd.encode(fwd.points(uniform_cloud(20, 1)));
  }
  for (std::size_t k = 0; k < s.buffers.size(); ++k) CHECK(s.buffers[k].value == before[k].value);
  {
    diff::Tape tape;
    Forward fwd(tape, s, NormMode::kTrain);
    fwd.encode(fwd.points(uniform_cloud(20, 1)));
  }
  CHECK_FALSE(s.buffers[0].value == before[0].value);

  diff::Tape tape;
  Forward fwd(tape, s, NormMode::kTrain);
  CHECK_THROWS_AS(fwd.encode(fwd.points(uniform_cloud(1, 1))), BatchTooSmallError);
}

TEST_CASE("permutation behaviour") {
  ModelState s = init_model(small_config());
  const auto pc = uniform_cloud(64, 9);
  const auto perm = shuffled(64, 10);
  const auto pp = permute(pc, perm);

  SUBCASE("eval mode is exactly equivariant") {
    diff::Tape tape;
    Forward fwd(tape, s, NormMode::kEval);
    const Tensor a = fwd.class_logits(fwd.encode(fwd.points(pc))).value();
    const Tensor b = fwd.class_logits(fwd.encode(fwd.points(pp))).value();
    bool exact = true;
    for (std::size_t r = 0; r < perm.size(); ++r)
      for (std::size_t c = 0; c < a.cols(); ++c) exact = exact && b.at(r, c) == a.at(static_cast<std::size_t>(perm[r]), c);
    CHECK(exact);
  }
  SUBCASE("train mode up to summation order") {
    diff::Tape tape;
    Forward fwd(tape, s, NormMode::kTrain, true, false);
    const Var fa = fwd.encode(fwd.points(pc));
    const Var fb = fwd.encode(fwd.points(pp));
    const Tensor a = fwd.class_logits(fa).value();
    const Tensor b = fwd.class_logits(fb).value();
    double worst = 0.0;
    for (std::size_t r = 0; r < perm.size(); ++r)
      for (std::size_t c = 0; c < a.cols(); ++c)
        worst = std::max(worst, std::abs(b.at(r, c) - a.at(static_cast<std::size_t>(perm[r]), c)));
    CHECK(worst < 1e-12);
    const Tensor ha = fwd.global_feature(fa).value();
    const Tensor hb = fwd.global_feature(fb).value();
    double pool = 0.0;
    for (std::size_t k = 0; k < ha.size(); ++k) pool = std::max(pool, std::abs(ha[k] - hb[k]));
    CHECK(pool < 1e-12);
  }
  SUBCASE("identical points give identical rows") {
    auto twin = pc;
    twin.points.row(5) = twin.points.row(17);
    diff::Tape tape;
    Forward fwd(tape, s, NormMode::kTrain, true, false);
    const Tensor f = fwd.encode(fwd.points(twin)).value();
    bool same = true;
    for (std::size_t c = 0; c < f.cols(); ++c) same = same && f.at(5, c) == f.at(17, c);
    CHECK(same);
  }
  SUBCASE("pooling in eval mode") {
    diff::Tape tape;
    Forward fwd(tape, s, NormMode::kEval);
    const Tensor h = fwd.global_feature(fwd.encode(fwd.points(pc))).value();
    CHECK(fwd.global_feature(fwd.encode(fwd.points(pp))).value() == h);
    geom::PointCloud doubled;
    doubled.points.resize(128, 3);
    doubled.points << pc.points, pc.points;
    CHECK(fwd.global_feature(fwd.encode(fwd.points(doubled))).value() == h);
    geom::PointCloud one;
    one.points = pc.points.topRows(1);
    const Var f1 = fwd.encode(fwd.points(one));
    CHECK(fwd.global_feature(f1).value().storage() == f1.value().storage());
  }
}

TEST_CASE("joint encoding") {
  ModelState s = init_model(small_config());
  const auto a = uniform_cloud(30, 1), b = uniform_cloud(20, 2);
  diff::Tape tape;
  Forward fwd(tape, s, NormMode::kTrain, true, false);
  const std::vector<Var> clouds{fwd.points(a), fwd.points(b)};
  const auto joint = fwd.encode_joint(clouds);
  REQUIRE(joint.size() == 2);
  CHECK(joint[0].shape() == diff::Shape{30, 32});
  CHECK(joint[1].shape() == diff::Shape{20, 32});
  geom::PointCloud both;
  both.points.resize(50, 3);
  both.points << a.points, b.points;
  const Tensor whole = fwd.encode(fwd.points(both)).value();
  bool same = true;
  for (std::size_t r = 0; r < 20; ++r)
    for (std::size_t c = 0; c < 32; ++c) same = same && joint[1].value().at(r, c) == whole.at(30 + r, c);
  CHECK(same);
  const std::vector<Var> single{fwd.points(a)};
  CHECK(fwd.encode_joint(single)[0].value() == fwd.encode(fwd.points(a)).value());
  CHECK_THROWS_AS(fwd.encode_joint(std::vector<Var>{}), EmptyInputError);
}

TEST_CASE("eval-mode projection is deterministic") {
  ModelState s = init_model(small_config());
  diff::Tape tape;
  Forward fwd(tape, s, NormMode::kEval);
  const Var h = tape.constant(Tensor::matrix(1, 32, std::vector<double>(32, 0.3)));
  CHECK(fwd.project(h).value() == fwd.project(h).value());
}

TEST_CASE("gradients reach the encoder") {
  const auto cfg = small_config();
  const auto pc = uniform_cloud(24, 4);
  std::vector<double> probe(8);
  std::iota(probe.begin(), probe.end(), -3.0);

  // <q, c> summed over two copies of the global feature.
  auto value = [&](ModelState& s, bool backward, std::vector<Tensor>* grads) {
    diff::Tape tape;
    Forward fwd(tape, s, NormMode::kTrain, true, false);
    const auto other = uniform_cloud(24, 5);
    const Var ha = fwd.global_feature(fwd.encode(fwd.points(pc)));
    const Var hb = fwd.global_feature(fwd.encode(fwd.points(other)));
    const Var q = fwd.predict(fwd.project(diff::stack_rows(std::vector<Var>{ha, hb})));
    const Var c = tape.constant(Tensor::matrix(2, 8, [&] {
      std::vector<double> v(probe);
      v.insert(v.end(), probe.rbegin(), probe.rend());
      return v;
    }()));
    const Var loss = diff::sum(diff::mul(q, c));
    if (backward) *grads = parameter_gradients(fwd, tape.backward(loss));
    return loss.value().item();
  };

  ModelState s = init_model(cfg);
  std::vector<Tensor> grads;
  value(s, true, &grads);
  REQUIRE(grads.size() == s.params.size());
  for (std::size_t k = 0; k < grads.size(); ++k) CHECK(grads[k].shape() == s.params[k].value.shape());

  std::size_t checked = 0;
  for (std::size_t k = 0; k < s.params.size(); ++k) {
    if (s.params[k].name.rfind("encoder.0", 0) != 0 && s.params[k].name.rfind("projector.0", 0) != 0) continue;
    CAPTURE(s.params[k].name);
    CHECK(max_abs(grads[k]) > 0.0);
    for (std::size_t i : {std::size_t{0}, s.params[k].value.size() / 2}) {
      const double h = 1e-5;
      const double x0 = s.params[k].value[i];
      s.params[k].value[i] = x0 + h;
      const double up = value(s, false, nullptr);
      s.params[k].value[i] = x0 - h;
      const double down = value(s, false, nullptr);
      s.params[k].value[i] = x0;
      const double fd = (up - down) / (2 * h);
      CHECK(std::abs(fd - grads[k][i]) <= 1e-6 * std::max(1.0, std::abs(fd)));
      ++checked;
    }
  }
  CHECK(checked >= 6);
}
