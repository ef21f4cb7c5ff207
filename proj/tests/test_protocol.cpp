#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mmofl/protocol.hpp"
#include "mmofl/rng.hpp"
#include "oracles.hpp"

using namespace mmofl;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model() {
    ModelConfig cfg;
    cfg.num_modalities = 2;
    cfg.input_dims = {4, 4};
    cfg.feature_dim = 4;
    cfg.num_classes = 3;
    cfg.encoder_kinds = {EncoderKind::Linear, EncoderKind::Linear};
    cfg.head_kind = HeadKind::Linear;
    return cfg;
}

ExperimentSpec small_spec(Strategy strategy, double lambda, int rounds) {
    ExperimentSpec spec;
    spec.model = small_model();
    spec.synthetic.num_classes = 3;
    spec.synthetic.input_dims = {4, 4};
    spec.synthetic.class_center_separation = 1.0;
    spec.synthetic.noise_std = 0.8;
    spec.synthetic.modality_informativeness = {1.0, 1.0};
    spec.synthetic.total_samples = 400;
    spec.partition.num_clients = 3;
    spec.partition.alpha = 10.0;
    spec.partition.initial_pool_per_client = 80;
    spec.partition.window_size = 24;
    spec.partition.churn_per_round = 6;
    spec.lambda = lambda;
    spec.train.rounds = rounds;
    spec.train.local_iters = 1;
    spec.train.eta0 = 0.1;
    spec.train.decay = 0.98;
    spec.train.eta_floor = 0.001;
    spec.train.strategy = strategy;
    return spec;
}

RoundBatch missing_batch(const ModelConfig& cfg, Rng& rng, size_t n, int missing) {
    RoundBatch batch = oracle::random_batch(cfg, rng, n);
    batch.availability[missing] = false;
    batch.data[missing] = Matrix();
    return batch;
}

}  // namespace

TEST_CASE("eta schedule: decays per round and clamps at the floor") {
    TrainConfig har;
    har.rounds = 200;
    har.eta0 = 0.1;
    har.decay = 0.95;
    har.eta_floor = 0.001;
    // 0.1 * 0.95^t reaches 0.001 at t = ceil(ln 0.01 / ln 0.95) = 90
    CHECK(har.eta_at(89) > 0.001);
    CHECK(har.eta_at(90) == doctest::Approx(0.001));
    for (int t = 1; t < 200; ++t) {
        CHECK(har.eta_at(t) <= har.eta_at(t - 1));
        CHECK(har.eta_at(t) >= har.eta_floor);
    }

    TrainConfig mvsa;
    mvsa.eta0 = 0.01;
    mvsa.decay = 0.99;
    mvsa.eta_floor = 0.001;
    CHECK(mvsa.eta_at(0) == doctest::Approx(0.01));
    CHECK(mvsa.eta_at(500) == doctest::Approx(0.001));
}

TEST_CASE("local_update_full: E=1 is one explicit gradient step") {
    const ModelConfig cfg = small_model();
    const ModelParams global = init_params(cfg, 1);
    Rng rng(2);
    const RoundBatch batch = oracle::random_batch(cfg, rng, 8);
    const LocalResult r = local_update_full(cfg, global, batch, 1, 0.05);
    const GradientVector g = backward(cfg, global, batch, {}, {true, true});
    CHECK(r.params.bitwise_equal(sgd_step(global, g, 0.05)));
}

TEST_CASE("local_update_full: E=3 equals three chained steps") {
    const ModelConfig cfg = small_model();
    const ModelParams global = init_params(cfg, 3);
    Rng rng(4);
    const RoundBatch batch = oracle::random_batch(cfg, rng, 8);
    const LocalResult r = local_update_full(cfg, global, batch, 3, 0.05);
    ModelParams p = global;
    for (int i = 0; i < 3; ++i) p = sgd_step(p, backward(cfg, p, batch, {}, {true, true}), 0.05);
    CHECK(r.params.bitwise_equal(p));
}

TEST_CASE("local_update_full: a stationary point stays put for any E") {
    // identical features labelled with both classes in equal measure cancel
    // the gradient exactly at the uniform-logits point
    ModelConfig cfg;
    cfg.num_modalities = 1;
    cfg.input_dims = {3};
    cfg.feature_dim = 3;
    cfg.num_classes = 2;
    cfg.encoder_kinds = {EncoderKind::Identity};
    cfg.head_kind = HeadKind::Linear;
    ModelParams zero;
    zero.head.assign(cfg.head_param_count(), 0.0);
    zero.encoders.resize(1);
    RoundBatch batch;
    batch.availability = {true};
    batch.labels = {0, 1};
    Matrix x(2, 3);
    for (int j = 0; j < 3; ++j) x(0, j) = x(1, j) = 0.7 * (j + 1);
    batch.data.push_back(x);
    for (int e : {1, 2, 5}) {
        const LocalResult r = local_update_full(cfg, zero, batch, e, 0.1);
        CHECK(r.params.bitwise_equal(zero));
    }
}

TEST_CASE("local_update_partial: nothing missing degrades to the full update") {
    const ModelConfig cfg = small_model();
    const ModelParams global = init_params(cfg, 5);
    Rng rng(6);
    const RoundBatch batch = oracle::random_batch(cfg, rng, 8);
    const LocalResult full = local_update_full(cfg, global, batch, 2, 0.05);
    const LocalResult partial = local_update_partial(cfg, global, batch, 2, 0.05);
    CHECK(partial.params.bitwise_equal(full.params));
}

TEST_CASE("local_update_partial: missing encoder block returns bit-identical") {
    const ModelConfig cfg = small_model();
    const ModelParams global = init_params(cfg, 7);
    Rng rng(8);
    const RoundBatch batch = missing_batch(cfg, rng, 8, 1);
    const LocalResult r = local_update_partial(cfg, global, batch, 2, 0.05);
    CHECK(r.params.encoders[1] == global.encoders[1]);
    bool head_moved = false;
    for (size_t i = 0; i < global.head.size(); ++i)
        head_moved |= r.params.head[i] != global.head[i];
    CHECK(head_moved);
    bool enc0_moved = false;
    for (size_t i = 0; i < global.encoders[0].size(); ++i)
        enc0_moved |= r.params.encoders[0][i] != global.encoders[0][i];
    CHECK(enc0_moved);
}

TEST_CASE("local_update_partial: E=1 step matches finite differences of the masked loss") {
    const ModelConfig cfg = small_model();
    const ModelParams global = init_params(cfg, 9);
    Rng rng(10);
    const RoundBatch batch = missing_batch(cfg, rng, 6, 0);
    const double eta = 0.05;
    const LocalResult r = local_update_partial(cfg, global, batch, 1, eta);

    FeatureOverrides overrides;
    overrides[0] = FeatureOverride{Matrix(6, cfg.feature_dim), FeatureSource::ZeroFilled};
    for (size_t i = 0; i < global.total_size(); ++i) {
        if (oracle::flat_block(global, i) == 1) continue;  // masked encoder
        const double implied = (oracle::get_flat(global, i) - oracle::get_flat(r.params, i)) / eta;
        const double fd = oracle::finite_diff(cfg, global, batch, overrides, i);
        CHECK(oracle::rel_err(fd, implied) < 1e-5);
    }
    CHECK_THROWS_AS(
        local_update_partial(cfg, global,
                             [&] {
                                 Rng r2(11);
                                 RoundBatch b = missing_batch(cfg, r2, 4, 0);
                                 b.availability[1] = false;
                                 b.data[1] = Matrix();
                                 return b;
                             }(),
                             1, eta),
        std::invalid_argument);
}

TEST_CASE("local_update_zerofill: nothing missing degrades to the full update") {
    const ModelConfig cfg = small_model();
    const ModelParams global = init_params(cfg, 12);
    Rng rng(13);
    const RoundBatch batch = oracle::random_batch(cfg, rng, 8);
    CHECK(local_update_zerofill(cfg, global, batch, 2, 0.05)
              .params.bitwise_equal(local_update_full(cfg, global, batch, 2, 0.05).params));
}

TEST_CASE("local_update_zerofill: missing encoder weights freeze, bias keeps learning") {
    const ModelConfig cfg = small_model();
    const ModelParams global = init_params(cfg, 14);
    Rng rng(15);
    const RoundBatch batch = missing_batch(cfg, rng, 8, 1);
    const LocalResult r = local_update_zerofill(cfg, global, batch, 1, 0.05);
    // zero input: weight grad dZ^T X vanishes, bias grad does not
    const size_t wcount = 16;  // 4x4 weight block ahead of the bias
    for (size_t i = 0; i < wcount; ++i) CHECK(r.params.encoders[1][i] == global.encoders[1][i]);
    bool bias_moved = false;
    for (size_t i = wcount; i < global.encoders[1].size(); ++i)
        bias_moved |= r.params.encoders[1][i] != global.encoders[1][i];
    CHECK(bias_moved);
}

TEST_CASE("zerofill and partial coincide for identity encoders") {
    ModelConfig cfg;
    cfg.num_modalities = 2;
    cfg.input_dims = {3, 3};
    cfg.feature_dim = 3;
    cfg.num_classes = 2;
    cfg.encoder_kinds = {EncoderKind::Identity, EncoderKind::Identity};
    cfg.head_kind = HeadKind::Linear;
    const ModelParams global = init_params(cfg, 16);
    Rng rng(17);
    const RoundBatch batch = missing_batch(cfg, rng, 6, 1);
    const LocalResult zf = local_update_zerofill(cfg, global, batch, 2, 0.1);
    const LocalResult pm = local_update_partial(cfg, global, batch, 2, 0.1);
    CHECK(zf.params.bitwise_equal(pm.params));
}

TEST_CASE("local_update_pmm: nothing missing degrades to the full update") {
    const ModelConfig cfg = small_model();
    const ModelParams global = init_params(cfg, 18);
    Rng rng(19);
    const RoundBatch batch = oracle::random_batch(cfg, rng, 8);
    const PrototypeMatrix protos(2, 3, 4, true);
    CHECK(local_update_pmm(cfg, global, batch, 2, 0.05, protos, true)
              .params.bitwise_equal(local_update_full(cfg, global, batch, 2, 0.05).params));
}

TEST_CASE("local_update_pmm: all-zero prototypes reproduce the partial update") {
    const ModelConfig cfg = small_model();
    const ModelParams global = init_params(cfg, 20);
    Rng rng(21);
    const RoundBatch batch = missing_batch(cfg, rng, 8, 0);
    const PrototypeMatrix protos(2, 3, 4, true);  // uninitialized: zero fallback
    const LocalResult pmm = local_update_pmm(cfg, global, batch, 2, 0.05, protos, true);
    const LocalResult pm = local_update_partial(cfg, global, batch, 2, 0.05);
    CHECK(pmm.params.bitwise_equal(pm.params));
    CHECK(pmm.fallback_rows == 8);  // one lookup per row, shared by both local iterations
}

TEST_CASE("local_update_pmm: substituted features drive the head gradient") {
    const ModelConfig cfg = small_model();
    const ModelParams global = init_params(cfg, 22);
    Rng rng(23);
    const RoundBatch batch = missing_batch(cfg, rng, 6, 1);
    PrototypeMatrix protos(2, 3, 4, false);
    TemporalPrototypes t;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> v(4);
        for (double& x : v) x = rng.normal();
        t[{1, c}] = v;
    }
    update_persistent(protos, t, 0);

    const double eta = 0.05;
    const LocalResult r = local_update_pmm(cfg, global, batch, 1, eta, protos, true);
    CHECK(r.fallback_rows == 0);
    FeatureOverrides overrides;
    overrides[1] = FeatureOverride{substitute(protos, batch.labels, 1, true).features,
                                   FeatureSource::PrototypeSubstituted};
    for (size_t i = 0; i < global.total_size(); ++i) {
        if (oracle::flat_block(global, i) == 2) continue;
        const double implied = (oracle::get_flat(global, i) - oracle::get_flat(r.params, i)) / eta;
        const double fd = oracle::finite_diff(cfg, global, batch, overrides, i);
        CHECK(oracle::rel_err(fd, implied) < 1e-5);
    }
    CHECK(r.params.encoders[1] == global.encoders[1]);
}

TEST_CASE("averaging K identical local results reproduces a single client") {
    const ModelConfig cfg = small_model();
    const ModelParams global = init_params(cfg, 24);
    Rng rng(25);
    const RoundBatch batch = oracle::random_batch(cfg, rng, 8);
    const LocalResult local = local_update_full(cfg, global, batch, 2, 0.1);
    const ModelParams avg = average_params(
        {{0, &local.params}, {1, &local.params}, {2, &local.params}});
    CHECK(avg.bitwise_equal(local.params));
}

TEST_CASE("experiment: K=1 makes the global model the client's local result") {
    ExperimentSpec spec = small_spec(Strategy::FullModality, 0.0, 1);
    spec.partition.num_clients = 1;
    Experiment exp(spec, 3);
    const ModelParams before = exp.global_params();
    RoundHooks hooks;
    ModelParams uploaded;
    hooks.on_upload = [&](int, int, const ModelParams& p) { uploaded = p; };
    exp.step(1, &hooks);
    CHECK(exp.global_params().bitwise_equal(uploaded));
    CHECK_FALSE(exp.global_params().bitwise_equal(before));
}

TEST_CASE("experiment: one FM round equals theta - (eta/K) * sum of gradients") {
    const ExperimentSpec spec = small_spec(Strategy::FullModality, 0.0, 1);
    Experiment exp(spec, 11);
    const ModelParams theta0 = exp.global_params();
    exp.step();
    const ModelParams& theta1 = exp.global_params();

    const double eta = spec.train.eta_at(0);
    std::vector<long double> acc(theta0.total_size(), 0.0L);
    for (int k = 0; k < spec.partition.num_clients; ++k) {
        const RoundBatch batch = make_batch(exp.dataset(), exp.batch_rows()[0][k], k, 0);
        const GradientVector g = backward(spec.model, theta0, batch, {}, {true, true});
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += oracle::get_flat_grad(g, i);
    }
    for (size_t i = 0; i < acc.size(); ++i) {
        const double expected =
            oracle::get_flat(theta0, i) -
            eta / spec.partition.num_clients * static_cast<double>(acc[i]);
        CHECK(std::fabs(oracle::get_flat(theta1, i) - expected) < 1e-12);
    }
}

TEST_CASE("experiment: T=0 emits an empty series") {
    const ExperimentSpec spec = small_spec(Strategy::FullModality, 0.0, 0);
    Experiment exp(spec, 1);
    exp.run_all();
    CHECK(exp.records().empty());
    CHECK(exp.events().empty());
}

TEST_CASE("experiment: fm with lambda > 0 is rejected") {
    const ExperimentSpec spec = small_spec(Strategy::FullModality, 0.5, 10);
    CHECK_THROWS_AS(Experiment(spec, 1), std::invalid_argument);
}

TEST_CASE("experiment: strategy degeneracy at lambda 0 over 10 rounds") {
    std::vector<std::vector<double>> losses, accs;
    std::vector<ModelParams> finals;
    for (Strategy s : {Strategy::FullModality, Strategy::PartialModality, Strategy::ZeroFilling,
                       Strategy::PMM}) {
        Experiment exp(small_spec(s, 0.0, 10), 21);
        exp.run_all();
        std::vector<double> loss, acc;
        for (const auto& r : exp.records()) {
            loss.push_back(r.train_loss);
            acc.push_back(r.test_acc);
        }
        losses.push_back(loss);
        accs.push_back(acc);
        finals.push_back(exp.global_params());
    }
    for (size_t i = 1; i < finals.size(); ++i) {
        CHECK(finals[i].bitwise_equal(finals[0]));
        CHECK(losses[i] == losses[0]);
        CHECK(accs[i] == accs[0]);
    }
}

TEST_CASE("experiment: missing-block freeze holds for pm and pmm") {
    for (Strategy s : {Strategy::PartialModality, Strategy::PMM}) {
        Experiment exp(small_spec(s, 0.5, 16), 31);
        int frozen_checks = 0;
        while (exp.round() < 16) {
            const ModelParams broadcast = exp.global_params();
            const int t = exp.round();
            RoundHooks hooks;
            hooks.on_upload = [&](int round, int client, const ModelParams& upload) {
                for (int m = 0; m < 2; ++m) {
                    if (!exp.schedule().is_missing(round, client, m)) continue;
                    CHECK(upload.encoders[m] == broadcast.encoders[m]);
                    ++frozen_checks;
                }
            };
            exp.step(1, &hooks);
            (void)t;
        }
        CHECK(frozen_checks > 0);
    }
}

TEST_CASE("experiment: trajectory identical across 1, 2 and 4 workers") {
    std::vector<ModelParams> finals;
    std::vector<std::vector<double>> losses;
    for (int workers : {1, 2, 4}) {
        Experiment exp(small_spec(Strategy::PMM, 0.4, 12), 5);
        exp.run_all(workers);
        finals.push_back(exp.global_params());
        std::vector<double> loss;
        for (const auto& r : exp.records()) loss.push_back(r.train_loss);
        losses.push_back(loss);
    }
    CHECK(finals[1].bitwise_equal(finals[0]));
    CHECK(finals[2].bitwise_equal(finals[0]));
    CHECK(losses[1] == losses[0]);
    CHECK(losses[2] == losses[0]);
}

TEST_CASE("experiment: a round replays bit-exactly from a checkpoint") {
    const std::string path = (fs::temp_directory_path() / "mmofl_ck_test.bin").string();
    const ExperimentSpec spec = small_spec(Strategy::PMM, 0.5, 12);
    Experiment full(spec, 9);
    for (int t = 0; t < 6; ++t) full.step();
    full.save_checkpoint(path);
    std::vector<double> tail_losses;
    while (full.step()) {
    }
    for (const auto& r : full.records())
        if (r.round >= 6) tail_losses.push_back(r.train_loss);

    Experiment resumed(spec, 9);
    resumed.restore_checkpoint(path);
    CHECK(resumed.round() == 6);
    resumed.run_all();
    CHECK(resumed.global_params().bitwise_equal(full.global_params()));
    std::vector<double> resumed_losses;
    for (const auto& r : resumed.records()) resumed_losses.push_back(r.train_loss);
    CHECK(resumed_losses == tail_losses);

    Experiment wrong_seed(spec, 10);
    CHECK_THROWS_AS(wrong_seed.restore_checkpoint(path), std::runtime_error);
    fs::remove(path);
}

TEST_CASE("experiment: pmm exchanges prototype bits, fm does not") {
    Experiment fm(small_spec(Strategy::FullModality, 0.0, 8), 2);
    fm.run_all();
    for (const auto& r : fm.records()) {
        CHECK(r.proto_bits_up == 0);
        CHECK(r.proto_bits_down == 0);
        CHECK(r.opc_executions == 0);
        CHECK(r.model_bits_up > 0);
        CHECK(r.model_bits_up == r.model_bits_down);
    }
    Experiment pmm(small_spec(Strategy::PMM, 0.0, 8), 2);
    pmm.run_all();
    uint64_t proto_total = 0;
    for (const auto& r : pmm.records()) {
        proto_total += r.proto_bits_up + r.proto_bits_down;
        CHECK(r.opc_executions == 2);  // both modalities collected every clean round
    }
    CHECK(proto_total > 0);
}

TEST_CASE("experiment: synchronized missing rounds suspend prototype collection") {
    const ExperimentSpec spec = small_spec(Strategy::PMM, 0.5, 20);
    Experiment exp(spec, 7);
    exp.run_all();
    for (const auto& r : exp.records()) {
        const bool clean = !exp.schedule().any_missing(r.round);
        if (clean) {
            CHECK(r.opc_executions == 2);
            CHECK(r.proto_bits_up > 0);
        } else {
            CHECK(r.opc_executions == 0);
            CHECK(r.proto_bits_up == 0);
            CHECK(r.proto_bits_down == 0);
        }
    }
}

TEST_CASE("experiment: event log carries one row per client per round") {
    const ExperimentSpec spec = small_spec(Strategy::ZeroFilling, 0.5, 6);
    Experiment exp(spec, 13);
    exp.run_all();
    CHECK(exp.events().size() == 6u * 3);
    const std::string csv = events_to_csv(exp.events());
    CHECK(csv.rfind("round,client,strategy,modalities_available,local_loss,upload_bytes\n", 0) ==
          0);
    for (const auto& ev : exp.events()) {
        CHECK(ev.modalities_available.size() == 2);
        CHECK(std::isfinite(ev.local_loss));
        CHECK(ev.upload_bytes > 0);
        CHECK(ev.strategy == Strategy::ZeroFilling);
    }
}
