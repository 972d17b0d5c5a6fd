#include <tsrl/tdm.hpp>

#include <tsrl/envs.hpp>

#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace tsrl;
using namespace tsrl::tdm;
using test_support::affine;
using test_support::constant_net;
using test_support::random_matrix;
using test_support::stub_model;

namespace {

double rel_err(const Matd& a, const Matd& b) {
  const double denom = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / denom;
}

data::TransitionDataset linear_dataset(Eigen::Index n, std::uint64_t seed,
                                       envs::BehaviorPolicy pol = envs::BehaviorPolicy::medium) {
  envs::OracleEnv env = envs::make_env("linear_reversible", {}, 0);
  return envs::collect_dataset(env, pol, n, seed);
}

}  // namespace

TEST_CASE("encode: determinism, shapes, dim errors") {
  TdmConfig cfg;
  cfg.encoder_hidden = {8};
  cfg.dynamics_hidden = {8};
  cfg.latent_state_dim = 3;
  cfg.latent_action_dim = 2;
  data::NormalizationStats st;
  st.mean = Vecd::Zero(4);
  st.std = Vecd::Ones(4);
  auto m = make_model<double>(cfg, 4, 2, st, 42);

  const Matd s = random_matrix(6, 4, 1);
  const Matd a = random_matrix(6, 2, 2);
  auto [zs1, za1] = m.encode(s, a);
  auto [zs2, za2] = m.encode(s, a);
  CHECK(zs1.rows() == 6);
  CHECK(zs1.cols() == 3);
  CHECK(za1.cols() == 2);
  CHECK((zs1 - zs2).norm() == 0.0);
  CHECK((za1 - za2).norm() == 0.0);
  CHECK_THROWS_AS(m.encode(random_matrix(6, 3, 3), a), ArgumentError);
}

TEST_CASE("encode: linear encoder Jacobian block matches the weight block") {
  // z = W [s; a]; the state Jacobian of the z_s block is the top-left block
  auto m = stub_model<double>(3, 2);
  Matd W = random_matrix(5, 5, 4);
  m.encoder = affine<double>(W, RowVecd::Zero(5));
  const Matd s = random_matrix(1, 3, 5);
  const Matd a = random_matrix(1, 2, 6);

  // finite-difference Jacobian of z_s w.r.t. s
  const double h = 1e-6;
  Matd jac(3, 3);
  for (Eigen::Index c = 0; c < 3; ++c) {
    Matd sp = s, sm = s;
    sp(0, c) += h;
    sm(0, c) -= h;
    jac.col(c) = ((m.encode(sp, a).first - m.encode(sm, a).first) / (2.0 * h)).row(0).transpose();
  }
  CHECK(rel_err(jac, W.block(0, 0, 3, 3)) < 1e-7);
}

TEST_CASE("loss_reconstruction: identity autoencoder, forced arithmetic, permutation") {
  auto m = stub_model<double>(2, 1);
  const Matd s = random_matrix(5, 2, 7);
  const Matd a = random_matrix(5, 1, 8);
  CHECK(loss_reconstruction(m, s, a) < 1e-24);

  // s = [1], decoder outputs 0.5; a = [0], action decoder outputs 0
  auto m1 = stub_model<double>(1, 1);
  m1.dec_state = constant_net<double>(2, RowVecd::Constant(1, 0.5));
  m1.dec_action = constant_net<double>(1, RowVecd::Zero(1));
  Matd s1(1, 1), a1(1, 1);
  s1 << 1.0;
  a1 << 0.0;
  CHECK(loss_reconstruction(m1, s1, a1) == Catch::Approx(0.25));

  // batch-mean reduction is permutation invariant
  auto m2 = stub_model<double>(2, 1);
  m2.dec_state = constant_net<double>(3, RowVecd::Zero(2));
  const double v1 = loss_reconstruction(m2, s, a);
  Matd sp(5, 2), ap(5, 1);
  const int perm[5] = {3, 0, 4, 1, 2};
  for (int i = 0; i < 5; ++i) {
    sp.row(i) = s.row(perm[i]);
    ap.row(i) = a.row(perm[i]);
  }
  CHECK(loss_reconstruction(m2, sp, ap) == Catch::Approx(v1));
}

TEST_CASE("loss_forward_ode: identity encoder with exact stub vanishes") {
  auto m = stub_model<double>(2, 1);
  Matd s(1, 2), a(1, 1), sn(1, 2);
  s << 0.3, -0.7;
  a << 0.2;
  sn << 0.4, -0.5;
  const RowVecd sdot = sn.row(0) - s.row(0);
  m.fwd_dyn = constant_net<double>(3, sdot);
  CHECK(loss_forward_ode(m, s, a, sn) < 1e-24);
}

TEST_CASE("loss_forward_ode: jvp against central differences on a relu encoder") {
  TdmConfig cfg;
  cfg.encoder_hidden = {6};
  cfg.dynamics_hidden = {4};
  data::NormalizationStats st;
  st.mean = Vecd::Zero(3);
  st.std = Vecd::Ones(3);
  auto m = make_model<double>(cfg, 3, 2, st, 11);
  const Matd s = random_matrix(4, 3, 12);
  const Matd a = random_matrix(4, 2, 13);
  const Matd sn = s + 0.1 * random_matrix(4, 3, 14);
  const Matd sdot = sn - s;

  Matd x(4, 5), u(4, 5);
  x << s, a;
  u << sdot, Matd::Zero(4, 2);
  auto [z, ju] = m.encoder.forward_jvp(x, u);
  const double h = 1e-5;
  Matd fd = (m.encoder.forward(x + h * u) - m.encoder.forward(x - h * u)) / (2.0 * h);
  CHECK(rel_err(ju, fd) < 1e-4);
}

TEST_CASE("loss_forward_ode and loss_reverse_ode: parameter gradients match finite differences") {
  TdmConfig cfg;
  cfg.encoder_hidden = {3};
  cfg.dynamics_hidden = {2};
  data::NormalizationStats st;
  st.mean = Vecd::Zero(2);
  st.std = Vecd::Ones(2);
  auto m = make_model<double>(cfg, 2, 1, st, 21);
  const Matd s = random_matrix(3, 2, 22);
  const Matd a = random_matrix(3, 1, 23);
  const Matd sn = s + 0.2 * random_matrix(3, 2, 24);

  for (const bool reverse : {false, true}) {
    LossSelect sel;
    (reverse ? sel.rvs : sel.fwd) = true;
    ad::Tape<double> t;
    TrainedNets tn;
    tn.encoder = true;
    tn.fwd = true;
    tn.rvs = true;
    auto pv = register_model(t, m, tn);
    auto terms = build_losses(t, m, pv, s, a, sn, sel);
    t.backward(reverse ? terms.rvs : terms.fwd);

    auto loss_of = [&](const TdmModel<double>& model) {
      return reverse ? loss_reverse_ode(model, s, a, sn) : loss_forward_ode(model, s, a, sn);
    };
    const double h = 1e-6;
    for (std::size_t li = 0; li < m.encoder.layers.size(); ++li) {
      Matd fd(m.encoder.layers[li].W.rows(), m.encoder.layers[li].W.cols());
      for (Eigen::Index r = 0; r < fd.rows(); ++r)
        for (Eigen::Index c = 0; c < fd.cols(); ++c) {
          TdmModel<double> mp = m, mm = m;
          mp.encoder.layers[li].W(r, c) += h;
          mm.encoder.layers[li].W(r, c) -= h;
          fd(r, c) = (loss_of(mp) - loss_of(mm)) / (2.0 * h);
        }
      CHECK(rel_err(t.grad(pv.encoder.layers[li].first), fd) < 1e-3);
    }
  }
}

TEST_CASE("loss_ds_reconstruction: exact stub, forced arithmetic, indicator branch") {
  auto m = stub_model<double>(2, 1);
  Matd s(1, 2), a(1, 1), sn(1, 2);
  s << 0.1, 0.2;
  a << -0.3;
  sn << 0.6, 0.1;
  const RowVecd sdot = sn.row(0) - s.row(0);
  // psi_s(z, delta) = z with the identity stub, so f = sdot gives zero loss
  m.fwd_dyn = constant_net<double>(3, sdot);
  CHECK(loss_ds_reconstruction(m, s, a, sn) < 1e-24);

  // sdot = [1, 0], decoder output [0, 0] -> 1.0
  auto m2 = stub_model<double>(2, 1);
  m2.dec_state = constant_net<double>(3, RowVecd::Zero(2));
  Matd s2(1, 2), a2(1, 1), sn2(1, 2);
  s2 << 0.0, 0.0;
  a2 << 0.0;
  sn2 << 1.0, 0.0;
  CHECK(loss_ds_reconstruction(m2, s2, a2, sn2) == Catch::Approx(1.0));

  // decoder that adds c * delta: the ds path must use the delta = 1 branch
  auto m3 = stub_model<double>(2, 1);
  Matd Wd(2, 3);
  Wd << 1, 0, 5, 0, 1, 5;  // psi(z, delta) = z + 5 * delta
  m3.dec_state = affine<double>(Wd, RowVecd::Zero(2));
  m3.fwd_dyn = constant_net<double>(3, sdot);
  const double expect = (Vecd::Constant(2, 5.0)).squaredNorm();
  CHECK(loss_ds_reconstruction(m3, s, a, sn) == Catch::Approx(expect));
  // while the reconstruction path uses delta = 0 and stays exact
  CHECK(loss_reconstruction(m3, s, a) < 1e-24);
}

TEST_CASE("loss_reverse_ode: exact stub and antisymmetric jvp target") {
  auto m = stub_model<double>(2, 1);
  Matd s(1, 2), a(1, 1), sn(1, 2);
  s << 0.4, 0.4;
  a << 0.1;
  sn << 0.2, 0.9;
  const RowVecd sdot = sn.row(0) - s.row(0);
  m.rvs_dyn = constant_net<double>(3, RowVecd(-sdot));
  CHECK(loss_reverse_ode(m, s, a, sn) < 1e-24);

  // the reverse jvp target is the negation of the forward jvp at (s', a)
  TdmConfig cfg;
  cfg.encoder_hidden = {5};
  cfg.dynamics_hidden = {4};
  data::NormalizationStats st;
  st.mean = Vecd::Zero(2);
  st.std = Vecd::Ones(2);
  auto net = make_model<double>(cfg, 2, 1, st, 31);
  Matd x(1, 3), u_fwd(1, 3), u_rvs(1, 3);
  x << sn, a;
  u_fwd << sdot, 0.0;
  u_rvs << -sdot, 0.0;
  auto [z1, j_fwd] = net.encoder.forward_jvp(x, u_fwd);
  auto [z2, j_rvs] = net.encoder.forward_jvp(x, u_rvs);
  CHECK((j_fwd + j_rvs).norm() < 1e-14);
}

TEST_CASE("loss_tsym: constant stubs and forced arithmetic") {
  auto m = stub_model<double>(2, 2);
  const Matd zs = random_matrix(6, 2, 41);
  const Matd za = random_matrix(6, 2, 42);

  RowVecd c(2);
  c << 0.7, -1.3;
  m.fwd_dyn = constant_net<double>(4, c);
  m.rvs_dyn = constant_net<double>(4, RowVecd(-c));
  CHECK(loss_tsym(m, zs, za) < 1e-24);

  auto m1 = stub_model<double>(1, 1);
  m1.fwd_dyn = constant_net<double>(2, RowVecd::Constant(1, 1.0));
  m1.rvs_dyn = constant_net<double>(2, RowVecd::Constant(1, -0.5));
  const Matd z1 = random_matrix(3, 1, 43);
  CHECK(loss_tsym(m1, z1, z1) == Catch::Approx(0.25));
}

TEST_CASE("loss_tsym: linear reversible pair leaves residual ||A f||^2") {
  // f(z, w) = A z + B w and g(z, w) = -A z - B w compose to
  // f + g(z + f) = -A f, checked symbolically against random A, B.
  const Eigen::Index dz = 3, dw = 2;
  const Matd A = random_matrix(dz, dz, 51);
  const Matd B = random_matrix(dz, dw, 52);
  auto m = stub_model<double>(dz, dw);
  Matd Wf(dz, dz + dw), Wg(dz, dz + dw);
  Wf << A, B;
  Wg << -A, -B;
  m.fwd_dyn = affine<double>(Wf, RowVecd::Zero(dz));
  m.rvs_dyn = affine<double>(Wg, RowVecd::Zero(dz));

  const Matd zs = random_matrix(10, dz, 53);
  const Matd za = random_matrix(10, dw, 54);
  const Matd f = (zs * A.transpose() + za * B.transpose());
  const double expected = (f * A.transpose()).rowwise().squaredNorm().mean();
  CHECK(loss_tsym(m, zs, za) == Catch::Approx(expected));
}

TEST_CASE("loss_tsym_enhanced: substitution identities") {
  // exact propagation: z_next = z + f makes both terms equal
  const Eigen::Index dz = 2, dw = 1;
  auto m = stub_model<double>(dz, dw);
  const Matd A = 0.3 * random_matrix(dz, dz, 61);
  const Matd B = random_matrix(dz, dw, 62);
  Matd Wf(dz, dz + dw);
  Wf << A, B;
  m.fwd_dyn = affine<double>(Wf, RowVecd::Zero(dz));
  Rng rng(63);
  m.rvs_dyn = nn::Mlp<double>::init(dz + dw, {4}, dz, rng);

  const Matd zs = random_matrix(5, dz, 64);
  const Matd za = random_matrix(5, dw, 65);
  Matd zin(5, dz + dw);
  zin << zs, za;
  const Matd z_next = zs + m.fwd_dyn.forward(zin);
  CHECK(loss_tsym_enhanced(m, zs, za, z_next) ==
        Catch::Approx(2.0 * loss_tsym(m, zs, za)));

  // f = 1, g = -1 -> 0; f = 1, g = -0.5 -> 0.25 + 0.25
  auto m1 = stub_model<double>(1, 1);
  m1.fwd_dyn = constant_net<double>(2, RowVecd::Constant(1, 1.0));
  m1.rvs_dyn = constant_net<double>(2, RowVecd::Constant(1, -1.0));
  const Matd z1 = random_matrix(4, 1, 66);
  CHECK(loss_tsym_enhanced(m1, z1, z1, z1) < 1e-24);
  m1.rvs_dyn = constant_net<double>(2, RowVecd::Constant(1, -0.5));
  CHECK(loss_tsym_enhanced(m1, z1, z1, z1) == Catch::Approx(0.5));
}

TEST_CASE("loss_total: zero certificate with zeroed dynamics and weight linearity") {
  // identity autoencoder, zero-initialized f and g, static transitions
  auto m = stub_model<double>(2, 1);
  const Matd s = random_matrix(4, 2, 71);
  const Matd a = random_matrix(4, 1, 72);
  CHECK(loss_total(m, s, a, s).total < 1e-24);

  // doubling w_fwd doubles exactly that contribution on a frozen model
  TdmConfig cfg;
  cfg.encoder_hidden = {6};
  cfg.dynamics_hidden = {5};
  data::NormalizationStats st;
  st.mean = Vecd::Zero(2);
  st.std = Vecd::Ones(2);
  auto net = make_model<double>(cfg, 2, 1, st, 73);
  const Matd sn = s + 0.1 * random_matrix(4, 2, 74);
  TdmLossValues v1 = loss_total(net, s, a, sn);
  net.cfg.w_fwd *= 2.0;
  TdmLossValues v2 = loss_total(net, s, a, sn);
  CHECK(v2.total - v1.total == Catch::Approx(0.1 * v1.fwd).epsilon(1e-9));
}

TEST_CASE("exact linear model zeroes the full objective on linear data") {
  envs::OracleEnv env = envs::make_env("linear_reversible", {}, 0);
  auto d = envs::collect_dataset(env, envs::BehaviorPolicy::medium, 256, 5);
  auto model = test_support::exact_linear_model(env);
  TdmLossValues v = loss_total(model, d.states, d.actions, d.next_states);
  CHECK(v.total - model.cfg.l1_scale * v.l1 <= 1e-10);
  CHECK(v.rec < 1e-20);
  CHECK(v.ds < 1e-20);
  CHECK(v.fwd < 1e-20);
  CHECK(v.rvs < 1e-20);
  CHECK(v.tsym < 1e-20);
}

TEST_CASE("train_tdm: loss decreases over one epoch on a toy dataset") {
  auto d = linear_dataset(10, 3);
  auto [norm, stats] = data::normalize_states(d);
  TdmConfig cfg;
  cfg.encoder_hidden = {8};
  cfg.dynamics_hidden = {8};
  cfg.training_epochs = 1;
  cfg.pretrain_epochs = 0;
  cfg.batch_size = 10;
  cfg.learning_rate = 1e-3;

  int improved = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto before_model = make_model<double>(cfg, 4, 2, stats, seed);
    const double before =
        loss_total(before_model, norm.states, norm.actions, norm.next_states).total;
    auto result = train_tdm<double>(norm, stats, cfg, seed);
    const double after =
        loss_total(result.model, norm.states, norm.actions, norm.next_states).total;
    if (after < before) ++improved;
  }
  CHECK(improved >= 9);
}

TEST_CASE("train_tdm: bitwise seed determinism of the final loss") {
  auto d = linear_dataset(64, 4);
  auto [norm, stats] = data::normalize_states(d);
  TdmConfig cfg;
  cfg.encoder_hidden = {6};
  cfg.dynamics_hidden = {6};
  cfg.training_epochs = 3;
  cfg.pretrain_epochs = 1;
  cfg.batch_size = 32;
  auto r1 = train_tdm<double>(norm, stats, cfg, 17);
  auto r2 = train_tdm<double>(norm, stats, cfg, 17);
  CHECK(r1.final_loss == r2.final_loss);
  CHECK(r1.model.param_hash() == r2.model.param_hash());
  auto r3 = train_tdm<double>(norm, stats, cfg, 18);
  CHECK(r3.model.param_hash() != r1.model.param_hash());
}

TEST_CASE("train_tdm: pretraining phase only touches encoder and decoders") {
  auto d = linear_dataset(64, 5);
  auto [norm, stats] = data::normalize_states(d);
  TdmConfig cfg;
  cfg.encoder_hidden = {6};
  cfg.dynamics_hidden = {6};
  cfg.training_epochs = 2;
  cfg.pretrain_epochs = 2;  // never leaves the pretrain phase
  cfg.batch_size = 32;
  auto result = train_tdm<double>(norm, stats, cfg, 19);
  auto fresh = make_model<double>(cfg, 4, 2, stats, 19);
  CHECK(result.model.fwd_dyn.param_hash() == fresh.fwd_dyn.param_hash());
  CHECK(result.model.rvs_dyn.param_hash() == fresh.rvs_dyn.param_hash());
  CHECK(result.model.encoder.param_hash() != fresh.encoder.param_hash());
  for (const auto& e : result.history) CHECK(e.pretrain);
}

TEST_CASE("train_tdm: ae_rep never updates the latent dynamics") {
  auto d = linear_dataset(64, 6);
  auto [norm, stats] = data::normalize_states(d);
  TdmConfig cfg;
  cfg.encoder_hidden = {6};
  cfg.dynamics_hidden = {6};
  cfg.training_epochs = 4;
  cfg.pretrain_epochs = 0;
  cfg.batch_size = 32;
  cfg.variant = Variant::ae_rep;
  auto result = train_tdm<double>(norm, stats, cfg, 20);
  auto fresh = make_model<double>(cfg, 4, 2, stats, 20);
  CHECK(result.model.fwd_dyn.param_hash() == fresh.fwd_dyn.param_hash());
  CHECK(result.model.rvs_dyn.param_hash() == fresh.rvs_dyn.param_hash());
}

TEST_CASE("train_tdm: every variant trains and reports finite losses") {
  auto d = linear_dataset(64, 7);
  auto [norm, stats] = data::normalize_states(d);
  for (Variant v : {Variant::tdm, Variant::tdm_no_ode, Variant::ae_fwd_rep, Variant::ae_rep}) {
    TdmConfig cfg;
    cfg.encoder_hidden = {6};
    cfg.dynamics_hidden = {6};
    cfg.training_epochs = 2;
    cfg.pretrain_epochs = 0;
    cfg.batch_size = 32;
    cfg.variant = v;
    auto result = train_tdm<double>(norm, stats, cfg, 21);
    CHECK(std::isfinite(result.final_loss));
    if (v == Variant::ae_rep)
      CHECK(result.history.back().losses.total ==
            Catch::Approx(result.history.back().losses.rec));
  }
}

TEST_CASE("train_tdm: enhanced T-symmetry variant adds the encoded-next term") {
  auto m = stub_model<double>(1, 1);
  m.fwd_dyn = constant_net<double>(2, RowVecd::Constant(1, 1.0));
  m.rvs_dyn = constant_net<double>(2, RowVecd::Constant(1, -0.5));
  const Matd s = random_matrix(4, 1, 81);
  const Matd a = random_matrix(4, 1, 82);
  const Matd sn = s;
  m.cfg.enhanced_tsym = false;
  const double plain = loss_total(m, s, a, sn).tsym;
  m.cfg.enhanced_tsym = true;
  const double enhanced = loss_total(m, s, a, sn).tsym;
  CHECK(plain == Catch::Approx(0.25));
  CHECK(enhanced == Catch::Approx(0.5));
}

TEST_CASE("train_tdm: non-finite data aborts with a diagnostic") {
  auto d = linear_dataset(32, 8);
  d.states(3, 1) = std::numeric_limits<double>::quiet_NaN();
  data::NormalizationStats st;
  st.mean = Vecd::Zero(4);
  st.std = Vecd::Ones(4);
  TdmConfig cfg;
  cfg.encoder_hidden = {4};
  cfg.dynamics_hidden = {4};
  cfg.training_epochs = 1;
  cfg.pretrain_epochs = 0;
  cfg.batch_size = 32;
  bool diag_called = false;
  DiagnosticSink<double> sink = [&](const TdmModel<double>&, const std::string& reason) {
    diag_called = true;
    CHECK(reason.find("non-finite") != std::string::npos);
  };
  CHECK_THROWS_AS(train_tdm<double>(d, st, cfg, 22, sink), NumericalError);
  CHECK(diag_called);
}

TEST_CASE("tsym_scores: non-negative and permutation equivariant") {
  auto d = linear_dataset(64, 9);
  auto [norm, stats] = data::normalize_states(d);
  TdmConfig cfg;
  cfg.encoder_hidden = {6};
  cfg.dynamics_hidden = {6};
  cfg.training_epochs = 2;
  cfg.pretrain_epochs = 0;
  cfg.batch_size = 32;
  auto result = train_tdm<double>(norm, stats, cfg, 23);
  const Vecd scores = tsym_scores(result.model, norm);
  REQUIRE(scores.size() == 64);
  CHECK(scores.minCoeff() >= 0.0);

  // permute rows and compare
  data::TransitionDataset shuffled = norm;
  std::vector<Eigen::Index> perm(64);
  for (Eigen::Index i = 0; i < 64; ++i) perm[static_cast<std::size_t>(i)] = 63 - i;
  for (Eigen::Index i = 0; i < 64; ++i) {
    shuffled.states.row(i) = norm.states.row(perm[static_cast<std::size_t>(i)]);
    shuffled.actions.row(i) = norm.actions.row(perm[static_cast<std::size_t>(i)]);
    shuffled.next_states.row(i) = norm.next_states.row(perm[static_cast<std::size_t>(i)]);
  }
  const Vecd scores2 = tsym_scores(result.model, shuffled);
  for (Eigen::Index i = 0; i < 64; ++i)
    CHECK(scores2(i) == scores(perm[static_cast<std::size_t>(i)]));
}
