#include "imdiff/autodiff.hpp"
#include "imdiff/neural_fields.hpp"
#include "imdiff/ops.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <numbers>

using namespace imdiff;

namespace {

CnfConfig small_config(FieldMode mode) {
  CnfConfig c;
  c.mode = mode;
  c.hyper_hidden = {8};
  c.latent_dim = 4;
  c.siren_hidden = {6, 6};
  c.out_dim = 2;
  c.omega0 = 3.0;
  c.projector_init_scale = 0.5;
  return c;
}

}  // namespace

TEST_CASE("ParamSet segments tile the flat vector") {
  ParamSet p;
  CHECK(p.add("a", 3) == 0);
  CHECK(p.add("b", 2, false) == 3);
  CHECK_THROWS(p.add("a", 1));
  CHECK_THROWS(p.add("c", 0));
  p.check_partition();
  Vector b(2);
  b << 5, 6;
  p.set("b", b);
  CHECK(p.values()[4] == 6);
  p.set("a", Vector::Constant(3, 2.0));
  Tensor flat(p.values());
  CHECK(p.view(flat, "b").value() == b);
  CHECK_THROWS_AS(p.view(flat, "a", {2, 2}), ShapeError);
  CHECK(p.regularizer(flat).item() == 12.0);
}

TEST_CASE("HyperNet with zero parameters outputs zero") {
  HyperNet net({3, 5, 4});
  Tensor h = net.forward(Tensor(Vector::Zero(net.param_count())), Tensor(Vector::Ones(3)));
  CHECK(h.size() == 4);
  CHECK(h.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single identity layer HyperNet passes the condition through") {
  HyperNet net({2, 2});
  Vector p(6);
  p << 1, 0, 0, 1, 0, 0;
  Vector c(2);
  c << 1, 2;
  CHECK(net.forward(Tensor(p), Tensor(c)).value() == c);
  CHECK_THROWS_AS(net.forward(Tensor(p), Tensor(Vector::Ones(3))), ShapeError);
}

TEST_CASE("HyperNet gradient of squared norm matches finite differences") {
  HyperNet net({3, 7, 5});
  std::mt19937_64 rng(2);
  const Vector p0 = net.init(rng);
  const Vector c = test::random_vector(3, rng);
  auto f = [&](const Vector& p) { return sum(square(net.forward(Tensor(p), Tensor(c)))).item(); };
  Tape tape;
  Tensor p = tape.leaf(p0);
  Vector g = tape.backward(sum(square(net.forward(p, Tensor(c))))).of(p);
  CHECK(test::rel_diff(g, finite_diff_grad(f, p0, 1e-6)) <= 1e-5);
}

TEST_CASE("one-unit SIREN reproduces sin(x)") {
  SirenNet net({1, 1, 1}, 1.0);
  Vector p(4);
  p << 1, 0, 1, 0;  // W1, b1, W2, b2
  Tensor y = net.forward(Tensor(p), Tensor({1, 1}, Vector::Constant(1, std::numbers::pi / 2)));
  CHECK(y.item() == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("SIREN first pre-activation scales linearly with omega0") {
  std::mt19937_64 rng(4);
  SirenNet a({2, 8, 1}, 1.0), b({2, 8, 1}, 30.0);
  const Vector p = a.init(rng);
  Tensor x({5, 2}, test::random_vector(10, rng));
  Vector za = a.first_preactivation(Tensor(p), x).value();
  Vector zb = b.first_preactivation(Tensor(p), x).value();
  CHECK(test::rel_diff(zb, 30.0 * za) < 1e-14);
}

TEST_CASE("SIREN init follows the documented bounds") {
  std::mt19937_64 rng(5);
  SirenNet net({2, 16, 16, 1}, 30.0);
  Vector p = net.init(rng);
  const auto& L = net.layout();
  CHECK(p.segment(L.weight_offset(0), 32).cwiseAbs().maxCoeff() <= 0.5);
  CHECK(p.segment(L.weight_offset(1), 256).cwiseAbs().maxCoeff() <= std::sqrt(6.0 / 16) / 30.0);
}

TEST_CASE("CNF with zero SIREN weights outputs the final bias") {
  ParamSet ps;
  Cnf cnf(small_config(FieldMode::Steady), ps, "f");
  std::mt19937_64 rng(1);
  cnf.initialize(ps, rng);
  ps.set("f.proj_w", Vector::Zero(ps.segment("f.proj_w").size));
  ps.set("f.proj_b", Vector::Zero(ps.segment("f.proj_b").size));
  Tensor flat(ps.values());
  auto out = time_conditioned_field(cnf, ps, flat, normalized_cell_centers(4, 4), 0.0);
  REQUIRE(out.size() == 2);
  CHECK(out[0].value().cwiseAbs().maxCoeff() == 0.0);
  CHECK(out[1].size() == 16);
}

TEST_CASE("steady fields ignore time, dynamic fields do not") {
  std::mt19937_64 rng(9);
  Tensor x = normalized_cell_centers(6, 3);
  {
    ParamSet ps;
    Cnf cnf(small_config(FieldMode::Steady), ps, "s");
    cnf.initialize(ps, rng);
    Tensor flat(ps.values());
    auto a = time_conditioned_field(cnf, ps, flat, x, 0.0);
    auto b = time_conditioned_field(cnf, ps, flat, x, 0.2);
    CHECK(a[0].value() == b[0].value());
  }
  {
    ParamSet ps;
    Cnf cnf(small_config(FieldMode::Dynamic), ps, "d");
    cnf.initialize(ps, rng);
    Tensor flat(ps.values());
    auto a = time_conditioned_field(cnf, ps, flat, x, 0.0);
    auto b = time_conditioned_field(cnf, ps, flat, x, 0.2);
    CHECK((a[0].value() - b[0].value()).cwiseAbs().maxCoeff() > 1e-6);
  }
}

TEST_CASE("CNF is a pointwise function of the coordinates") {
  ParamSet ps;
  Cnf cnf(small_config(FieldMode::Steady), ps, "f");
  std::mt19937_64 rng(3);
  cnf.initialize(ps, rng);
  Tensor flat(ps.values());
  auto coarse = time_conditioned_field(cnf, ps, flat, normalized_cell_centers(4, 2), 0.0);
  // Cell centres of the 4x2 grid are every third centre of the 12x6 grid.
  auto fine = time_conditioned_field(cnf, ps, flat, normalized_cell_centers(12, 6), 0.0);
  for (Index j = 0; j < 2; ++j)
    for (Index i = 0; i < 4; ++i) CHECK(coarse[1][i + 4 * j] == fine[1][(3 * i + 1) + 12 * (3 * j + 1)]);
}

TEST_CASE("CNF gradients match finite differences") {
  ParamSet ps;
  auto cfg = small_config(FieldMode::Steady);
  cfg.softplus = {false, true};
  Cnf cnf(cfg, ps, "f");
  std::mt19937_64 rng(8);
  cnf.initialize(ps, rng);
  Tensor x = normalized_cell_centers(5, 3);
  auto loss = [&](const Tensor& flat) {
    auto out = time_conditioned_field(cnf, ps, flat, x, 0.0);
    return mean(out[0]) + mean(square(out[1]));
  };
  Tape tape;
  Tensor flat = tape.leaf(ps.values());
  Vector g = tape.backward(loss(flat)).of(flat);
  Vector fd = finite_diff_grad([&](const Vector& v) { return loss(Tensor(v)).item(); }, ps.values(), 1e-6);
  CHECK(test::rel_diff(g, fd) <= 1e-5);

  // W_proj block on its own, the quantity named in the contract.
  const auto& s = ps.segment("f.proj_w");
  CHECK(test::rel_diff(Vector(g.segment(s.offset, s.size)), Vector(fd.segment(s.offset, s.size))) <= 1e-5);
}

TEST_CASE("softplus output is positive and gain/offset are applied") {
  ParamSet ps;
  auto cfg = small_config(FieldMode::Steady);
  cfg.out_dim = 1;
  cfg.softplus = {true};
  cfg.gain_init = {0.0};
  cfg.offset_init = {-3.0};
  Cnf cnf(cfg, ps, "nu");
  std::mt19937_64 rng(1);
  cnf.initialize(ps, rng);
  auto out = time_conditioned_field(cnf, ps, Tensor(ps.values()), normalized_cell_centers(4, 4), 0.0);
  const double expected = std::log1p(std::exp(-3.0));
  CHECK((out[0].value().array() - expected).abs().maxCoeff() < 1e-15);
}
