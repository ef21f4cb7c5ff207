#include "mmofl/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <sstream>
#include <stdexcept>

#include "mmofl/rng.hpp"
#include "mmofl/serialize.hpp"
#include "mmofl/threadpool.hpp"

namespace mmofl {

namespace {
[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }
}  // namespace

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::FullModality:
            return "fm";
        case Strategy::PartialModality:
            return "pm";
        case Strategy::ZeroFilling:
            return "zf";
        case Strategy::PMM:
            return "pmm";
    }
    return "?";
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "fm") return Strategy::FullModality;
    if (name == "pm") return Strategy::PartialModality;
    if (name == "zf") return Strategy::ZeroFilling;
    if (name == "pmm") return Strategy::PMM;
    fail("unknown strategy '" + name + "' (expected fm|pm|zf|pmm)");
}

void TrainConfig::validate() const {
    if (rounds < 0) fail("train.rounds must be >= 0");
    if (local_iters < 1) fail("train.local_iters must be >= 1");
    if (eta0 <= 0.0) fail("train.eta0 must be > 0");
    if (decay <= 0.0 || decay > 1.0) fail("train.decay must be in (0,1]");
    if (eta_floor <= 0.0) fail("train.eta_floor must be > 0");
}

double TrainConfig::eta_at(int round) const {
    return std::max(eta0 * std::pow(decay, round), eta_floor);
}

// ---- local updates -------------------------------------------------------

LocalResult local_update_full(const ModelConfig& cfg, const ModelParams& global,
                              const RoundBatch& batch, int local_iters, double eta) {
    if (!batch.all_available()) fail("local_update_full: batch has missing modalities");
    const std::vector<bool> avail(batch.availability.begin(), batch.availability.end());
    ModelParams p = global;
    for (int it = 0; it < local_iters; ++it) {
        const GradientVector g = backward(cfg, p, batch, {}, avail);
        p = sgd_step(p, g, eta);
    }
    LocalResult r;
    r.train_loss = forward(cfg, p, batch).loss;
    r.params = std::move(p);
    return r;
}

namespace {

LocalResult run_masked_updates(const ModelConfig& cfg, const ModelParams& global,
                               const RoundBatch& batch, int local_iters, double eta,
                               const FeatureOverrides& overrides) {
    const std::vector<bool> avail(batch.availability.begin(), batch.availability.end());
    ModelParams p = global;
    for (int it = 0; it < local_iters; ++it) {
        const GradientVector g = backward(cfg, p, batch, overrides, avail);
        p = sgd_step(p, g, eta);
    }
    LocalResult r;
    r.train_loss = forward(cfg, p, batch, overrides).loss;
    r.params = std::move(p);
    return r;
}

}  // namespace

LocalResult local_update_partial(const ModelConfig& cfg, const ModelParams& global,
                                 const RoundBatch& batch, int local_iters, double eta) {
    bool any_available = false;
    FeatureOverrides overrides;
    for (size_t m = 0; m < batch.availability.size(); ++m) {
        if (batch.availability[m]) {
            any_available = true;
        } else {
            overrides[static_cast<int>(m)] = FeatureOverride{
                Matrix(batch.size(), cfg.feature_dim), FeatureSource::ZeroFilled};
        }
    }
    if (!any_available) fail("local_update_partial: all modalities missing");
    return run_masked_updates(cfg, global, batch, local_iters, eta, overrides);
}

LocalResult local_update_zerofill(const ModelConfig& cfg, const ModelParams& global,
                                  const RoundBatch& batch, int local_iters, double eta) {
    bool any_available = false;
    for (bool a : batch.availability) any_available |= a;
    if (!any_available) fail("local_update_zerofill: all modalities missing");
    RoundBatch filled = batch;
    for (size_t m = 0; m < filled.availability.size(); ++m) {
        if (!filled.availability[m]) {
            filled.data[m] = Matrix(batch.size(), cfg.input_dims[m]);
            filled.availability[m] = true;
        }
    }
    return local_update_full(cfg, global, filled, local_iters, eta);
}

LocalResult local_update_pmm(const ModelConfig& cfg, const ModelParams& global,
                             const RoundBatch& batch, int local_iters, double eta,
                             const PrototypeMatrix& prototypes, bool fallback_to_zero) {
    bool any_available = false;
    int fallback_rows = 0;
    FeatureOverrides overrides;
    for (size_t m = 0; m < batch.availability.size(); ++m) {
        if (batch.availability[m]) {
            any_available = true;
            continue;
        }
        SubstituteResult sub =
            substitute(prototypes, batch.labels, static_cast<int>(m), fallback_to_zero);
        fallback_rows += sub.fallback_rows;
        overrides[static_cast<int>(m)] =
            FeatureOverride{std::move(sub.features), FeatureSource::PrototypeSubstituted};
    }
    if (!any_available) fail("local_update_pmm: all modalities missing");
    LocalResult r = run_masked_updates(cfg, global, batch, local_iters, eta, overrides);
    r.fallback_rows = fallback_rows;
    return r;
}

// ---- experiment ----------------------------------------------------------

void ExperimentSpec::validate() const {
    model.validate();
    if (source == DataSource::Synthetic) {
        synthetic.validate();
        if (synthetic.num_classes != model.num_classes)
            fail("synthetic.num_classes must match model.num_classes");
        if (synthetic.input_dims != model.input_dims)
            fail("synthetic.input_dims must match model.input_dims");
    } else if (external_manifest.empty()) {
        fail("data.external.manifest is required for external datasets");
    }
    if (test_fraction < 0.0 || test_fraction >= 1.0) fail("data.test_fraction must be in [0,1)");
    partition.validate();
    if (lambda < 0.0 || lambda > 1.0) fail("schedule.lambda must be in [0,1]");
    train.validate();
    pmm.quantizer.validate();
    pmm.delay.validate();
    if (train.strategy == Strategy::FullModality && lambda > 0.0)
        fail("strategy fm is the no-missing reference and requires lambda = 0");
}

Experiment::Experiment(const ExperimentSpec& spec, uint64_t seed)
    : spec_(spec), seed_(seed), delay_state_(spec.model.num_modalities) {
    spec_.validate();

    if (spec_.source == ExperimentSpec::DataSource::Synthetic) {
        SyntheticSpec gen = spec_.synthetic;
        if (!spec_.synthetic_seed_fixed) gen.seed = derive_seed(seed_, "data");
        dataset_ = generate_synthetic(gen);
    } else {
        dataset_ = load_external(spec_.external_manifest);
        if (dataset_.num_classes != spec_.model.num_classes)
            fail("external dataset num_classes must match model.num_classes");
        for (size_t m = 0; m < dataset_.num_modalities(); ++m)
            if (static_cast<int>(dataset_.modalities[m].cols) != spec_.model.input_dims[m])
                fail("external dataset modality " + std::to_string(m) +
                     " width must match model.input_dims");
    }
    if (dataset_.num_modalities() != static_cast<size_t>(spec_.model.num_modalities))
        fail("dataset modality count must match model.num_modalities");

    std::tie(train_rows_, test_rows_) =
        split_test(dataset_.size(), spec_.test_fraction, derive_seed(seed_, "split"));
    if (test_rows_.empty()) fail("test split is empty; increase data or test_fraction");
    test_batch_ = make_batch(dataset_, test_rows_, -1, -1);

    partition_ =
        partition_dirichlet(dataset_, train_rows_, spec_.partition, derive_seed(seed_, "partition"));
    schedule_ = build_schedule(spec_.train.rounds, spec_.lambda, spec_.model.num_modalities,
                               spec_.partition.num_clients, spec_.mode,
                               derive_seed(seed_, "schedule"));

    global_ = init_params(spec_.model, derive_seed(seed_, "init"));
    server_protos_ = PrototypeMatrix(spec_.model.num_modalities, spec_.model.num_classes,
                                     spec_.model.feature_dim, spec_.pmm.normalize_prototypes);

    auto empty_collection = std::make_shared<const PrototypeMatrix>(server_protos_);
    clients_.reserve(spec_.partition.num_clients);
    for (int k = 0; k < spec_.partition.num_clients; ++k) {
        clients_.push_back(Client{
            k,
            StreamState(partition_.pools[k], spec_.partition.window_size,
                        spec_.partition.churn_per_round,
                        derive_seed(seed_, "stream" + std::to_string(k))),
            empty_collection});
    }
}

void Experiment::run_opc_phase(int t, const std::vector<RoundBatch>& scheduled, RoundRecord& rec) {
    const int M = spec_.model.num_modalities;
    std::vector<int> full_clients;
    for (const auto& batch : scheduled)
        if (batch.all_available()) full_clients.push_back(batch.client_id);

    // a full-modality client observes every modality
    const bool observed = !full_clients.empty();
    std::vector<bool> due(M, false);
    int n_due = 0;
    for (int m = 0; m < M; ++m) {
        due[m] = should_run_opc(delay_state_, spec_.pmm.delay, m, observed);
        if (due[m]) ++n_due;
    }
    if (n_due == 0) return;

    std::vector<LocalPrototypeSet> locals;
    for (int k : full_clients) {
        LocalPrototypeSet set = build_local_prototypes(spec_.model, global_, scheduled[k],
                                                       spec_.pmm.normalize_prototypes);
        for (auto it = set.entries.begin(); it != set.entries.end();) {
            if (!due[it->first.first])
                it = set.entries.erase(it);
            else
                ++it;
        }
        const uint64_t bits = quantize_local_set(set, spec_.pmm.quantizer);
        rec.proto_bits_up += bits;
        for (auto& ev : events_)
            if (ev.round == t && ev.client == k) ev.upload_bytes += (bits + 7) / 8;
        locals.push_back(std::move(set));
    }

    const TemporalPrototypes temporal =
        aggregate_temporal(locals, spec_.pmm.normalize_prototypes);
    update_persistent(server_protos_, temporal, t);
    rec.opc_executions += n_due;

    const std::vector<uint8_t> blob = serialize_collection(server_protos_, spec_.pmm.quantizer);
    rec.proto_bits_down +=
        static_cast<uint64_t>(blob.size()) * 8 * static_cast<uint64_t>(clients_.size());
    auto snapshot = std::make_shared<const PrototypeMatrix>(deserialize_collection(blob));
    for (auto& client : clients_) client.collection = snapshot;
}

bool Experiment::step(int workers, const RoundHooks* hooks) {
    if (round_ >= spec_.train.rounds) return false;
    const int t = round_;
    const int K = static_cast<int>(clients_.size());
    const double eta = spec_.train.eta_at(t);

    RoundRecord rec;
    rec.round = t;
    rec.eta = eta;

    // full-modality view of the round data, kept for loss/regret accounting
    std::vector<RoundBatch> full_batches;
    full_batches.reserve(K);
    batch_rows_.emplace_back();
    for (auto& client : clients_) {
        batch_rows_.back().push_back(client.stream.window_rows());
        full_batches.push_back(make_batch(dataset_, client.stream.window_rows(), client.id, t));
    }

    double loss_sum = 0.0;
    for (const auto& batch : full_batches) loss_sum += forward(spec_.model, global_, batch).loss;
    rec.train_loss = loss_sum / K;
    iterates_.push_back(global_);

    std::vector<RoundBatch> scheduled = full_batches;
    for (auto& batch : scheduled) apply_schedule(batch, schedule_);

    const size_t event_base = events_.size();
    for (int k = 0; k < K; ++k) {
        std::string avail;
        for (bool a : scheduled[k].availability) avail += a ? '1' : '0';
        events_.push_back(EventRow{t, k, spec_.train.strategy, avail, 0.0, 0});
    }

    if (spec_.train.strategy == Strategy::PMM) run_opc_phase(t, scheduled, rec);

    // local updates; slot-indexed so worker count cannot change the result
    std::vector<LocalResult> results(K);
    std::vector<std::exception_ptr> errors(K);
    parallel_for(K, workers, [&](size_t k) {
        try {
            const RoundBatch& batch = scheduled[k];
            const int E = spec_.train.local_iters;
            switch (spec_.train.strategy) {
                case Strategy::FullModality:
                    results[k] = local_update_full(spec_.model, global_, batch, E, eta);
                    break;
                case Strategy::PartialModality:
                    results[k] = batch.all_available()
                                     ? local_update_full(spec_.model, global_, batch, E, eta)
                                     : local_update_partial(spec_.model, global_, batch, E, eta);
                    break;
                case Strategy::ZeroFilling:
                    results[k] = batch.all_available()
                                     ? local_update_full(spec_.model, global_, batch, E, eta)
                                     : local_update_zerofill(spec_.model, global_, batch, E, eta);
                    break;
                case Strategy::PMM:
                    results[k] = batch.all_available()
                                     ? local_update_full(spec_.model, global_, batch, E, eta)
                                     : local_update_pmm(spec_.model, global_, batch, E, eta,
                                                        *clients_[k].collection,
                                                        spec_.pmm.fallback_to_zero);
                    break;
            }
        } catch (...) {
            errors[k] = std::current_exception();
        }
    });
    for (int k = 0; k < K; ++k)
        if (errors[k]) std::rethrow_exception(errors[k]);  // synchronous round: abort

    const uint64_t model_bits = params_blob_bits(global_);
    std::vector<std::pair<int, const ModelParams*>> uploads;
    uploads.reserve(K);
    for (int k = 0; k < K; ++k) {
        uploads.emplace_back(clients_[k].id, &results[k].params);
        rec.prototype_fallback_rows += results[k].fallback_rows;
        events_[event_base + k].local_loss = results[k].train_loss;
        events_[event_base + k].upload_bytes += model_bits / 8;
        if (hooks && hooks->on_upload) hooks->on_upload(t, clients_[k].id, results[k].params);
    }
    rec.model_bits_up = model_bits * K;

    global_ = average_params(uploads);
    rec.model_bits_down = params_blob_bits(global_) * K;
    if (hooks && hooks->on_aggregate) hooks->on_aggregate(t, global_);

    rec.test_acc = predict_accuracy(spec_.model, global_, test_batch_);
    records_.push_back(rec);

    for (auto& client : clients_) client.stream.advance();
    ++round_;
    return round_ < spec_.train.rounds;
}

void Experiment::run_all(int workers, const RoundHooks* hooks) {
    while (round_ < spec_.train.rounds) step(workers, hooks);
}

static constexpr char kCheckpointMagic[8] = {'M', 'M', 'O', 'F', 'L', 'C', 'K', '1'};

void Experiment::save_checkpoint(const std::string& path) const {
    ByteWriter w;
    w.magic(kCheckpointMagic);
    // all run randomness derives from the seed and streams replay from round 0,
    // so the seed stands in for the RNG state
    w.u64(seed_);
    w.u32(static_cast<uint32_t>(round_));

    const std::vector<uint8_t> params_blob = serialize_params(global_);
    w.u64(params_blob.size());
    w.bytes(params_blob.data(), params_blob.size());

    const QuantizerConfig full = full_precision();
    const std::vector<uint8_t> proto_blob = serialize_collection(server_protos_, full);
    w.u64(proto_blob.size());
    w.bytes(proto_blob.data(), proto_blob.size());

    // the clients' last-broadcast snapshot can lag the server matrix
    const std::vector<uint8_t> snap_blob =
        serialize_collection(clients_.empty() ? server_protos_ : *clients_.front().collection,
                             full);
    w.u64(snap_blob.size());
    w.bytes(snap_blob.data(), snap_blob.size());

    w.u32(static_cast<uint32_t>(delay_state_.occurrences.size()));
    for (int n : delay_state_.occurrences) w.u32(static_cast<uint32_t>(n));
    for (int m = 0; m < spec_.model.num_modalities; ++m)
        w.u32(static_cast<uint32_t>(server_protos_.round_of_last_update[m] + 1));

    const auto& buf = w.data();
    write_file_atomic(path, buf.data(), buf.size());
}

void Experiment::restore_checkpoint(const std::string& path) {
    const std::vector<uint8_t> buf = read_file(path);
    ByteReader r(buf);
    r.expect_magic(kCheckpointMagic);
    const uint64_t seed = r.u64();
    if (seed != seed_)
        throw std::runtime_error("checkpoint was produced by seed " + std::to_string(seed) +
                                 ", experiment uses " + std::to_string(seed_));
    const int target_round = static_cast<int>(r.u32());
    if (target_round > spec_.train.rounds) throw std::runtime_error("checkpoint beyond horizon");

    auto read_blob = [&r]() {
        const uint64_t len = r.u64();
        std::vector<uint8_t> blob(len);
        for (auto& b : blob) b = r.u8();
        return blob;
    };
    global_ = deserialize_params(read_blob());
    server_protos_ = deserialize_collection(read_blob());
    auto snapshot = std::make_shared<const PrototypeMatrix>(deserialize_collection(read_blob()));

    const uint32_t n_delay = r.u32();
    if (n_delay != delay_state_.occurrences.size())
        throw std::runtime_error("checkpoint delay state does not match model");
    for (auto& n : delay_state_.occurrences) n = static_cast<int>(r.u32());
    for (int m = 0; m < spec_.model.num_modalities; ++m)
        server_protos_.round_of_last_update[m] = static_cast<int>(r.u32()) - 1;
    if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");

    for (auto& client : clients_) {
        client.collection = snapshot;
        client.stream.advance_to_round(target_round);
    }
    round_ = target_round;
    records_.clear();
    events_.clear();
    batch_rows_.clear();
    iterates_.clear();
}

std::string events_to_csv(const std::vector<EventRow>& events) {
    std::ostringstream out;
    out << "round,client,strategy,modalities_available,local_loss,upload_bytes\n";
    for (const auto& ev : events) {
        char loss[40];
        std::snprintf(loss, sizeof(loss), "%.17g", ev.local_loss);
        out << ev.round << ',' << ev.client << ',' << strategy_name(ev.strategy) << ','
            << ev.modalities_available << ',' << loss << ',' << ev.upload_bytes << '\n';
    }
    return out.str();
}

}  // namespace mmofl
