#include "mmofl/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace mmofl {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
    throw std::invalid_argument("config: " + path + ": " + msg);
}

const json& require(const json& j, const std::string& path, const std::string& key) {
    if (!j.is_object()) fail(path, "must be an object");
    const auto it = j.find(key);
    if (it == j.end()) fail(path + "." + key, "is required");
    return *it;
}

const json* maybe(const json& j, const std::string& key) {
    if (!j.is_object()) return nullptr;
    const auto it = j.find(key);
    return it == j.end() ? nullptr : &*it;
}

void check_keys(const json& j, const std::string& path, std::set<std::string> allowed) {
    if (!j.is_object()) fail(path, "must be an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) fail(path + "." + key, "unknown field");
}

int as_int(const json& j, const std::string& path) {
    if (!j.is_number_integer()) fail(path, "expected an integer");
    return j.get<int>();
}

double as_real(const json& j, const std::string& path) {
    if (!j.is_number()) fail(path, "expected a number");
    return j.get<double>();
}

bool as_bool(const json& j, const std::string& path) {
    if (!j.is_boolean()) fail(path, "expected true/false");
    return j.get<bool>();
}

std::string as_string(const json& j, const std::string& path) {
    if (!j.is_string()) fail(path, "expected a string");
    return j.get<std::string>();
}

std::vector<int> as_int_list(const json& j, const std::string& path) {
    if (!j.is_array()) fail(path, "expected an array of integers");
    std::vector<int> out;
    for (size_t i = 0; i < j.size(); ++i) out.push_back(as_int(j[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

std::vector<double> as_real_list(const json& j, const std::string& path) {
    if (!j.is_array()) fail(path, "expected an array of numbers");
    std::vector<double> out;
    for (size_t i = 0; i < j.size(); ++i) out.push_back(as_real(j[i], path + "[" + std::to_string(i) + "]"));
    return out;
}

EncoderKind encoder_kind(const std::string& name, const std::string& path) {
    if (name == "identity") return EncoderKind::Identity;
    if (name == "linear") return EncoderKind::Linear;
    if (name == "mlp1") return EncoderKind::Mlp1;
    fail(path, "unknown encoder kind '" + name + "' (identity|linear|mlp1)");
}

std::string encoder_kind_name(EncoderKind k) {
    switch (k) {
        case EncoderKind::Identity: return "identity";
        case EncoderKind::Linear: return "linear";
        case EncoderKind::Mlp1: return "mlp1";
    }
    return "?";
}

ModelConfig parse_model(const json& j) {
    check_keys(j, "model",
               {"num_modalities", "input_dims", "feature_dim", "num_classes", "encoder_kinds",
                "head_kind", "hidden_dim", "normalize_features"});
    ModelConfig m;
    m.num_modalities = as_int(require(j, "model", "num_modalities"), "model.num_modalities");
    m.input_dims = as_int_list(require(j, "model", "input_dims"), "model.input_dims");
    m.feature_dim = as_int(require(j, "model", "feature_dim"), "model.feature_dim");
    m.num_classes = as_int(require(j, "model", "num_classes"), "model.num_classes");
    if (const json* kinds = maybe(j, "encoder_kinds")) {
        if (!kinds->is_array()) fail("model.encoder_kinds", "expected an array");
        for (size_t i = 0; i < kinds->size(); ++i) {
            const std::string path = "model.encoder_kinds[" + std::to_string(i) + "]";
            m.encoder_kinds.push_back(encoder_kind(as_string((*kinds)[i], path), path));
        }
    } else {
        m.encoder_kinds.assign(m.num_modalities < 0 ? 0 : m.num_modalities, EncoderKind::Linear);
    }
    if (const json* head = maybe(j, "head_kind")) {
        const std::string name = as_string(*head, "model.head_kind");
        if (name == "linear")
            m.head_kind = HeadKind::Linear;
        else if (name == "mlp1")
            m.head_kind = HeadKind::Mlp1;
        else
            fail("model.head_kind", "unknown head kind '" + name + "' (linear|mlp1)");
    }
    if (const json* hidden = maybe(j, "hidden_dim")) m.hidden_dim = as_int(*hidden, "model.hidden_dim");
    if (const json* norm = maybe(j, "normalize_features"))
        m.normalize_features = as_bool(*norm, "model.normalize_features");
    return m;
}

SyntheticSpec parse_synthetic(const json& j, const std::string& path, const ModelConfig* inherit,
                              bool* seed_fixed) {
    check_keys(j, path,
               {"num_classes", "input_dims", "class_center_separation", "noise_std",
                "modality_informativeness", "total_samples", "seed"});
    SyntheticSpec s;
    if (const json* v = maybe(j, "num_classes"))
        s.num_classes = as_int(*v, path + ".num_classes");
    else if (inherit)
        s.num_classes = inherit->num_classes;
    else
        fail(path + ".num_classes", "is required");
    if (const json* v = maybe(j, "input_dims"))
        s.input_dims = as_int_list(*v, path + ".input_dims");
    else if (inherit)
        s.input_dims = inherit->input_dims;
    else
        fail(path + ".input_dims", "is required");
    if (const json* v = maybe(j, "class_center_separation"))
        s.class_center_separation = as_real(*v, path + ".class_center_separation");
    if (const json* v = maybe(j, "noise_std")) s.noise_std = as_real(*v, path + ".noise_std");
    if (const json* v = maybe(j, "modality_informativeness"))
        s.modality_informativeness = as_real_list(*v, path + ".modality_informativeness");
    else
        s.modality_informativeness.assign(s.input_dims.size(), 1.0);
    if (const json* v = maybe(j, "total_samples"))
        s.total_samples = as_int(*v, path + ".total_samples");
    else
        fail(path + ".total_samples", "is required");
    if (const json* v = maybe(j, "seed"); v && !v->is_null()) {
        if (!v->is_number_unsigned() && !v->is_number_integer())
            fail(path + ".seed", "expected an integer or null");
        s.seed = v->get<uint64_t>();
        if (seed_fixed) *seed_fixed = true;
    } else if (seed_fixed) {
        *seed_fixed = false;
    }
    return s;
}

PartitionConfig parse_partition(const json& j) {
    check_keys(j, "data.partition",
               {"num_clients", "alpha", "initial_pool_per_client", "window_size",
                "churn_per_round"});
    PartitionConfig p;
    p.num_clients = as_int(require(j, "data.partition", "num_clients"), "data.partition.num_clients");
    p.alpha = as_real(require(j, "data.partition", "alpha"), "data.partition.alpha");
    p.initial_pool_per_client = as_int(require(j, "data.partition", "initial_pool_per_client"),
                                       "data.partition.initial_pool_per_client");
    p.window_size = as_int(require(j, "data.partition", "window_size"), "data.partition.window_size");
    p.churn_per_round =
        as_int(require(j, "data.partition", "churn_per_round"), "data.partition.churn_per_round");
    return p;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config: not valid JSON: ") + e.what());
    }
    check_keys(j, "(root)",
               {"model", "data", "schedule", "train", "pmm", "seeds", "output_dir"});

    ExperimentConfig cfg;
    cfg.spec.model = parse_model(require(j, "(root)", "model"));

    const json& data = require(j, "(root)", "data");
    check_keys(data, "data", {"source", "synthetic", "external", "test_fraction", "partition"});
    const std::string source =
        maybe(data, "source") ? as_string(*maybe(data, "source"), "data.source") : "synthetic";
    if (source == "synthetic") {
        cfg.spec.source = ExperimentSpec::DataSource::Synthetic;
        if (!maybe(data, "synthetic")) fail("data.synthetic", "is required for synthetic source");
        cfg.spec.synthetic = parse_synthetic(*maybe(data, "synthetic"), "data.synthetic",
                                             &cfg.spec.model, &cfg.spec.synthetic_seed_fixed);
    } else if (source == "external") {
        cfg.spec.source = ExperimentSpec::DataSource::External;
        const json& ext = require(data, "data", "external");
        check_keys(ext, "data.external", {"manifest"});
        cfg.spec.external_manifest = as_string(require(ext, "data.external", "manifest"),
                                               "data.external.manifest");
    } else {
        fail("data.source", "expected 'synthetic' or 'external'");
    }
    if (const json* v = maybe(data, "test_fraction"))
        cfg.spec.test_fraction = as_real(*v, "data.test_fraction");
    cfg.spec.partition = parse_partition(require(data, "data", "partition"));

    const json& sched = require(j, "(root)", "schedule");
    check_keys(sched, "schedule", {"lambda", "mode"});
    cfg.spec.lambda = as_real(require(sched, "schedule", "lambda"), "schedule.lambda");
    if (const json* v = maybe(sched, "mode")) {
        const std::string mode = as_string(*v, "schedule.mode");
        if (mode == "synchronized")
            cfg.spec.mode = MissingSchedule::Mode::Synchronized;
        else if (mode == "independent")
            cfg.spec.mode = MissingSchedule::Mode::Independent;
        else
            fail("schedule.mode", "expected 'synchronized' or 'independent'");
    }

    const json& train = require(j, "(root)", "train");
    check_keys(train, "train", {"rounds", "local_iters", "eta0", "decay", "eta_floor", "strategy"});
    cfg.spec.train.rounds = as_int(require(train, "train", "rounds"), "train.rounds");
    if (const json* v = maybe(train, "local_iters"))
        cfg.spec.train.local_iters = as_int(*v, "train.local_iters");
    if (const json* v = maybe(train, "eta0")) cfg.spec.train.eta0 = as_real(*v, "train.eta0");
    if (const json* v = maybe(train, "decay")) cfg.spec.train.decay = as_real(*v, "train.decay");
    if (const json* v = maybe(train, "eta_floor"))
        cfg.spec.train.eta_floor = as_real(*v, "train.eta_floor");
    try {
        cfg.spec.train.strategy =
            strategy_from_name(as_string(require(train, "train", "strategy"), "train.strategy"));
    } catch (const std::invalid_argument& e) {
        fail("train.strategy", e.what());
    }

    if (const json* pmm = maybe(j, "pmm")) {
        check_keys(*pmm, "pmm",
                   {"quantizer_bits", "delay_interval", "normalize_prototypes",
                    "fallback_to_zero"});
        if (const json* v = maybe(*pmm, "quantizer_bits"))
            cfg.spec.pmm.quantizer.bits = as_int(*v, "pmm.quantizer_bits");
        if (const json* v = maybe(*pmm, "delay_interval"))
            cfg.spec.pmm.delay.interval = as_int(*v, "pmm.delay_interval");
        if (const json* v = maybe(*pmm, "normalize_prototypes"))
            cfg.spec.pmm.normalize_prototypes = as_bool(*v, "pmm.normalize_prototypes");
        if (const json* v = maybe(*pmm, "fallback_to_zero"))
            cfg.spec.pmm.fallback_to_zero = as_bool(*v, "pmm.fallback_to_zero");
    }

    const json& seeds = require(j, "(root)", "seeds");
    if (!seeds.is_array() || seeds.empty()) fail("seeds", "expected a non-empty array");
    for (size_t i = 0; i < seeds.size(); ++i) {
        const std::string path = "seeds[" + std::to_string(i) + "]";
        if (!seeds[i].is_number_integer() && !seeds[i].is_number_unsigned())
            fail(path, "expected an integer");
        cfg.seeds.push_back(seeds[i].get<uint64_t>());
    }
    std::set<uint64_t> unique(cfg.seeds.begin(), cfg.seeds.end());
    if (unique.size() != cfg.seeds.size()) fail("seeds", "duplicate seed values");

    if (const json* v = maybe(j, "output_dir")) cfg.output_dir = as_string(*v, "output_dir");

    try {
        cfg.spec.validate();
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(std::string("config: ") + e.what());
    }
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string dump_config(const ExperimentConfig& cfg) {
    ordered_json j;
    const ModelConfig& m = cfg.spec.model;
    j["model"]["num_modalities"] = m.num_modalities;
    j["model"]["input_dims"] = m.input_dims;
    j["model"]["feature_dim"] = m.feature_dim;
    j["model"]["num_classes"] = m.num_classes;
    std::vector<std::string> kinds;
    for (auto k : m.encoder_kinds) kinds.push_back(encoder_kind_name(k));
    j["model"]["encoder_kinds"] = kinds;
    j["model"]["head_kind"] = m.head_kind == HeadKind::Linear ? "linear" : "mlp1";
    j["model"]["hidden_dim"] = m.hidden_dim;
    j["model"]["normalize_features"] = m.normalize_features;

    if (cfg.spec.source == ExperimentSpec::DataSource::Synthetic) {
        j["data"]["source"] = "synthetic";
        const SyntheticSpec& s = cfg.spec.synthetic;
        j["data"]["synthetic"]["num_classes"] = s.num_classes;
        j["data"]["synthetic"]["input_dims"] = s.input_dims;
        j["data"]["synthetic"]["class_center_separation"] = s.class_center_separation;
        j["data"]["synthetic"]["noise_std"] = s.noise_std;
        j["data"]["synthetic"]["modality_informativeness"] = s.modality_informativeness;
        j["data"]["synthetic"]["total_samples"] = s.total_samples;
        if (cfg.spec.synthetic_seed_fixed)
            j["data"]["synthetic"]["seed"] = s.seed;
        else
            j["data"]["synthetic"]["seed"] = nullptr;
    } else {
        j["data"]["source"] = "external";
        j["data"]["external"]["manifest"] = cfg.spec.external_manifest;
    }
    j["data"]["test_fraction"] = cfg.spec.test_fraction;
    const PartitionConfig& p = cfg.spec.partition;
    j["data"]["partition"]["num_clients"] = p.num_clients;
    j["data"]["partition"]["alpha"] = p.alpha;
    j["data"]["partition"]["initial_pool_per_client"] = p.initial_pool_per_client;
    j["data"]["partition"]["window_size"] = p.window_size;
    j["data"]["partition"]["churn_per_round"] = p.churn_per_round;

    j["schedule"]["lambda"] = cfg.spec.lambda;
    j["schedule"]["mode"] =
        cfg.spec.mode == MissingSchedule::Mode::Synchronized ? "synchronized" : "independent";

    j["train"]["rounds"] = cfg.spec.train.rounds;
    j["train"]["local_iters"] = cfg.spec.train.local_iters;
    j["train"]["eta0"] = cfg.spec.train.eta0;
    j["train"]["decay"] = cfg.spec.train.decay;
    j["train"]["eta_floor"] = cfg.spec.train.eta_floor;
    j["train"]["strategy"] = strategy_name(cfg.spec.train.strategy);

    j["pmm"]["quantizer_bits"] = cfg.spec.pmm.quantizer.bits;
    j["pmm"]["delay_interval"] = cfg.spec.pmm.delay.interval;
    j["pmm"]["normalize_prototypes"] = cfg.spec.pmm.normalize_prototypes;
    j["pmm"]["fallback_to_zero"] = cfg.spec.pmm.fallback_to_zero;

    j["seeds"] = cfg.seeds;
    j["output_dir"] = cfg.output_dir;
    return j.dump(2) + "\n";
}

std::string config_template() {
    return R"(// Experiment config. Comments are allowed; unknown fields are rejected.
{
  "model": {
    "num_modalities": 2,
    "input_dims": [16, 16],
    "feature_dim": 16,            // encoder output width d
    "num_classes": 6,
    "encoder_kinds": ["linear", "linear"],  // identity | linear | mlp1
    "head_kind": "linear",                  // linear | mlp1
    "hidden_dim": 32,            // used by mlp1 layers only
    "normalize_features": false  // L2-normalize encoded feature rows before fusion
  },
  "data": {
    "source": "synthetic",       // synthetic | external
    "synthetic": {
      // num_classes / input_dims default to the model block when omitted
      "class_center_separation": 1.0,
      "noise_std": 2.0,
      "modality_informativeness": [1.0, 1.0],  // 0 = that modality is pure noise
      "total_samples": 3000,
      "seed": null               // null: derived from the run seed
    },
    // "external": { "manifest": "dataset/manifest.json" },
    "test_fraction": 0.2,        // held-out full-modality test split
    "partition": {
      "num_clients": 5,
      "alpha": 10.0,             // Dirichlet concentration; larger = closer to IID
      "initial_pool_per_client": 480,
      "window_size": 100,        // online window N
      "churn_per_round": 20      // samples swapped per round
    }
  },
  "schedule": {
    "lambda": 0.5,               // fraction of rounds with a missing modality
    "mode": "synchronized"       // synchronized | independent
  },
  "train": {
    "rounds": 400,               // artifact default; pick per experiment
    "local_iters": 1,            // E
    "eta0": 0.1,
    "decay": 0.95,               // per-round multiplicative decay
    "eta_floor": 0.001,
    "strategy": "pmm"            // fm | pm | zf | pmm
  },
  "pmm": {
    "quantizer_bits": 32,        // 2..32; 32 = full precision
    "delay_interval": 0,         // modality occurrences between collections; 0 = every round
    "normalize_prototypes": true,
    "fallback_to_zero": true     // uninitialized prototype rows substitute zeros
  },
  "seeds": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
  "output_dir": "out"
}
)";
}

SyntheticSpec parse_synthetic_spec_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("spec: cannot open " + path);
    json j;
    try {
        j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("spec: not valid JSON: ") + e.what());
    }
    bool seed_fixed = false;
    SyntheticSpec s = parse_synthetic(j, "(root)", nullptr, &seed_fixed);
    if (!seed_fixed) fail("(root).seed", "is required for gen-data");
    s.validate();
    return s;
}

RunLabels labels_for(const ExperimentConfig& cfg, uint64_t seed) {
    RunLabels labels;
    labels.lambda = cfg.spec.lambda;
    labels.alpha = cfg.spec.partition.alpha;
    labels.bits = cfg.spec.pmm.quantizer.bits;
    labels.delay = cfg.spec.pmm.delay.interval;
    labels.strategy = strategy_name(cfg.spec.train.strategy);
    labels.seed = static_cast<long long>(seed);
    return labels;
}

}  // namespace mmofl
