#include "remed/modelio.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "remed/base64.hpp"

namespace remed::trainer {

using json = nlohmann::ordered_json;

namespace {

json tensor_to_json(const nd::HostTensor<float>& t) {
    json j;
    j["shape"] = t.shape;
    j["data_f32_le_base64"] =
        base64_encode(reinterpret_cast<const uint8_t*>(t.data.data()), t.data.size() * sizeof(float));
    return j;
}

nd::HostTensor<float> tensor_from_json(const json& j) {
    std::vector<int> shape = j.at("shape").get<std::vector<int>>();
    auto bytes = base64_decode(j.at("data_f32_le_base64").get<std::string>());
    std::vector<float> data(bytes.size() / sizeof(float));
    std::memcpy(data.data(), bytes.data(), bytes.size());
    return nd::HostTensor<float>(std::move(shape), std::move(data));
}

const char* kind_str(events::TaskKind k) {
    switch (k) {
        case events::TaskKind::Binary: return "binary";
        case events::TaskKind::Multiclass: return "multiclass";
        case events::TaskKind::Multilabel: return "multilabel";
    }
    return "?";
}

events::TaskKind kind_from(const std::string& s) {
    if (s == "binary") return events::TaskKind::Binary;
    if (s == "multiclass") return events::TaskKind::Multiclass;
    if (s == "multilabel") return events::TaskKind::Multilabel;
    throw nd::GraphError("model file: unknown task kind '" + s + "'");
}

std::string fp_hex(uint64_t fp) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
    return buf;
}

}  // namespace

void save_model(const TrainedModel& model, const encoder::HashEncoderConfig& enc_cfg,
                const std::string& path) {
    json cfg;
    cfg["kind"] = model.baseline ? "cached_baseline" : "remed";
    cfg["train"] = {{"learning_rate", model.tcfg.learning_rate},
                    {"warmup_steps", model.tcfg.warmup_steps},
                    {"batch_size", model.tcfg.batch_size},
                    {"k", model.tcfg.k},
                    {"max_epochs", model.tcfg.max_epochs},
                    {"patience", model.tcfg.patience},
                    {"seed", model.tcfg.seed},
                    {"path_order", std::string(1, model.tcfg.path_order)},
                    {"baseline_max_events", model.tcfg.baseline_max_events}};
    cfg["retriever"] = {{"dim", model.rcfg.dim},
                        {"d_time", model.rcfg.d_time},
                        {"hidden", model.rcfg.hidden},
                        {"chunk", model.rcfg.chunk},
                        {"scorer", model.rcfg.kind == retriever::ScorerKind::Mlp ? "mlp" : "cosine"}};
    cfg["predictor"] = {{"dim", model.pcfg.dim},       {"d_time", model.pcfg.d_time},
                        {"d_model", model.pcfg.d_model}, {"layers", model.pcfg.layers},
                        {"heads", model.pcfg.heads},     {"ffn", model.pcfg.ffn}};
    cfg["encoder"] = {{"kind", "hash"},
                      {"dim", enc_cfg.dim},
                      {"buckets", enc_cfg.buckets},
                      {"seed", enc_cfg.seed},
                      {"fingerprint", fp_hex(model.encoder_fingerprint)}};
    cfg["tasks"] = json::array();
    for (const auto& t : model.tasks)
        cfg["tasks"].push_back({{"name", t.name}, {"kind", kind_str(t.kind)}, {"classes", t.classes}});
    cfg["step"] = model.steps_done;
    cfg["best_val_micro_auroc"] = model.best_val_micro_auroc;

    json params = json::object();
    auto dump = [&](const char* name, nd::HostTensor<float>& t) { params[name] = tensor_to_json(t); };
    if (!model.baseline) const_cast<TrainedModel&>(model).rparams.for_each(dump);
    const_cast<TrainedModel&>(model).pparams.for_each(dump);

    json root;
    root["format_version"] = 1;
    root["config"] = std::move(cfg);
    root["params"] = std::move(params);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw nd::GraphError("cannot write model file: " + path);
    out << root.dump() << '\n';
    if (!out) throw nd::GraphError("model write failed: " + path);
}

LoadedModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw nd::GraphError("cannot open model file: " + path);
    json root = json::parse(in);
    if (root.value("format_version", -1) != 1) throw nd::GraphError("unsupported model format_version");
    const json& cfg = root.at("config");

    LoadedModel lm;
    TrainedModel& m = lm.model;
    m.baseline = cfg.at("kind").get<std::string>() == "cached_baseline";
    const json& t = cfg.at("train");
    m.tcfg.learning_rate = t.at("learning_rate").get<double>();
    m.tcfg.warmup_steps = t.at("warmup_steps").get<int>();
    m.tcfg.batch_size = t.at("batch_size").get<int>();
    m.tcfg.k = t.at("k").get<int>();
    m.tcfg.max_epochs = t.at("max_epochs").get<int>();
    m.tcfg.patience = t.at("patience").get<int>();
    m.tcfg.seed = t.at("seed").get<uint64_t>();
    m.tcfg.path_order = t.at("path_order").get<std::string>()[0];
    m.tcfg.baseline_max_events = t.at("baseline_max_events").get<int>();
    const json& r = cfg.at("retriever");
    m.rcfg.dim = r.at("dim").get<int>();
    m.rcfg.d_time = r.at("d_time").get<int>();
    m.rcfg.hidden = r.at("hidden").get<int>();
    m.rcfg.chunk = r.at("chunk").get<int>();
    m.rcfg.kind = r.at("scorer").get<std::string>() == "cosine" ? retriever::ScorerKind::Cosine
                                                                : retriever::ScorerKind::Mlp;
    const json& p = cfg.at("predictor");
    m.pcfg.dim = p.at("dim").get<int>();
    m.pcfg.d_time = p.at("d_time").get<int>();
    m.pcfg.d_model = p.at("d_model").get<int>();
    m.pcfg.layers = p.at("layers").get<int>();
    m.pcfg.heads = p.at("heads").get<int>();
    m.pcfg.ffn = p.at("ffn").get<int>();
    const json& e = cfg.at("encoder");
    lm.enc_cfg.dim = e.at("dim").get<int>();
    lm.enc_cfg.buckets = e.at("buckets").get<int>();
    lm.enc_cfg.seed = e.at("seed").get<uint64_t>();
    m.encoder_fingerprint = std::stoull(e.at("fingerprint").get<std::string>(), nullptr, 16);
    for (const auto& jt : cfg.at("tasks")) {
        events::TaskSpec spec;
        spec.name = jt.at("name").get<std::string>();
        spec.kind = kind_from(jt.at("kind").get<std::string>());
        spec.classes = jt.at("classes").get<int>();
        m.tasks.push_back(std::move(spec));
    }
    m.steps_done = cfg.at("step").get<long>();
    m.best_val_micro_auroc = cfg.at("best_val_micro_auroc").get<double>();

    // rebuild parameter structs with the right shapes, then overwrite
    Rng rng(0);
    if (!m.baseline) m.rparams = retriever::RetrieverParams<float>::init(m.rcfg, rng);
    m.pparams = predictor::PredictorParams<float>::init(m.pcfg, m.tasks, rng);
    const json& params = root.at("params");
    auto fill = [&](const char* name, nd::HostTensor<float>& tns) {
        nd::HostTensor<float> loaded = tensor_from_json(params.at(name));
        if (loaded.shape != tns.shape) throw nd::GraphError(std::string("model param shape mismatch: ") + name);
        tns = std::move(loaded);
    };
    if (!m.baseline) m.rparams.for_each(fill);
    m.pparams.for_each(fill);
    return lm;
}

}  // namespace remed::trainer
