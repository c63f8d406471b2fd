#include "remed/encoder.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "remed/adam.hpp"
#include "remed/loss.hpp"

namespace remed::encoder {

static_assert(std::endian::native == std::endian::little, "cache format assumes little-endian");

using json = nlohmann::ordered_json;

uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            cur.push_back(char(std::tolower(static_cast<unsigned char>(c))));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

HashEncoder::HashEncoder(const HashEncoderConfig& cfg) : cfg_(cfg) {
    if (cfg.dim < 8) throw nd::GraphError("hash encoder: dim must be >= 8");
    if (cfg.buckets < cfg.dim) throw nd::GraphError("hash encoder: buckets must be >= dim");
    Rng rng = Rng(cfg.seed).derive("hash_projection");
    proj_.resize(size_t(cfg.buckets) * size_t(cfg.dim));
    for (auto& v : proj_) v = float(rng.normal());
    fingerprint_ = fnv1a64("hash|dim=" + std::to_string(cfg.dim) + "|buckets=" + std::to_string(cfg.buckets) +
                           "|seed=" + std::to_string(cfg.seed));
}

void HashEncoder::encode(std::string_view text, float* out) const {
    auto tokens = tokenize(text);
    if (tokens.empty()) throw nd::GraphError("hash encoder: no tokens in text");
    int d = cfg_.dim;
    std::fill_n(out, d, 0.0f);
    for (const auto& tok : tokens) {
        uint64_t h = fnv1a64(tok);
        size_t bucket = size_t(h % uint64_t(cfg_.buckets));
        float sign = (h >> 63) ? -1.0f : 1.0f;
        const float* row = proj_.data() + bucket * size_t(d);
        for (int j = 0; j < d; ++j) out[j] += sign * row[j];
    }
    double norm = 0;
    for (int j = 0; j < d; ++j) norm += double(out[j]) * double(out[j]);
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
        // opposite-sign bucket collisions can cancel everything; fall back to
        // a deterministic unit basis vector so nonempty text never maps to zero
        std::fill_n(out, d, 0.0f);
        out[fnv1a64(text) % uint64_t(d)] = 1.0f;
        return;
    }
    float inv = float(1.0 / norm);
    for (int j = 0; j < d; ++j) out[j] *= inv;
}

std::vector<float> HashEncoder::encode(std::string_view text) const {
    std::vector<float> v(size_t(cfg_.dim));
    encode(text, v.data());
    return v;
}

namespace {

std::vector<int> token_ids(std::string_view text, int vocab, int max_tokens) {
    auto tokens = tokenize(text);
    std::vector<int> ids;
    for (const auto& t : tokens) {
        if (int(ids.size()) >= max_tokens) break;
        ids.push_back(int(fnv1a64(t) % uint64_t(vocab)));
    }
    if (ids.empty()) ids.push_back(0);
    return ids;
}

struct AggregatorParams {
    nd::HostTensor<float> time_w;
    nd::HostTensor<float> cls;
    tf::TransformerParams<float> stack;
    std::vector<nd::HostTensor<float>> head_w, head_b;

    template <typename F>
    void for_each(F&& fn) {
        fn("agg.time_w", time_w);
        fn("agg.cls", cls);
        stack.for_each_prefixed("agg", fn);
        for (size_t i = 0; i < head_w.size(); ++i) {
            fn(("agg.head" + std::to_string(i) + ".w").c_str(), head_w[i]);
            fn(("agg.head" + std::to_string(i) + ".b").c_str(), head_b[i]);
        }
    }
};

// tokens -> event vector, CLS pooled
nd::Graph<float>::Id encode_event_node(nd::Graph<float>& g, const tf::ParamLeaves<float>& L,
                                       TrainedEncoder::EventLevelParams& p, const std::vector<int>& ids) {
    auto tok = g.embed_lookup(L(p.tok_embed), ids);
    std::vector<int> pos(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) pos[i] = int(i);
    auto emb = g.add(tok, g.embed_lookup(L(p.pos_embed), pos));
    auto seq = g.concat(L(p.cls), emb, 0);
    auto y = tf::build_stack(g, L, p.stack, seq);
    std::vector<float> sel(ids.size() + 1, 0.0f);
    sel[0] = 1.0f;
    return g.matmul(g.constant({1, int(ids.size()) + 1}, sel), y);
}

}  // namespace

TrainedEncoder TrainedEncoder::train(const events::Cohort& cohort, const TrainedEncoderConfig& cfg) {
    if (cohort.samples.empty()) throw nd::GraphError("trained encoder: empty train split");
    TrainedEncoder enc;
    enc.cfg_ = cfg;

    Rng root(cfg.seed);
    Rng init = root.derive("encoder_init");
    enc.params_.tok_embed = nd::HostTensor<float>::glorot(cfg.vocab, cfg.dim, init);
    enc.params_.pos_embed = nd::HostTensor<float>::glorot(cfg.max_tokens, cfg.dim, init);
    enc.params_.cls = nd::HostTensor<float>::glorot(1, cfg.dim, init);
    enc.params_.stack = tf::TransformerParams<float>::init(cfg.dim, cfg.layers, cfg.heads, cfg.ffn,
                                                           init.derive("stack"));
    AggregatorParams agg;
    Rng ainit = root.derive("aggregator_init");
    agg.time_w = nd::HostTensor<float>::glorot(cfg.d_time, cfg.dim, ainit);
    agg.cls = nd::HostTensor<float>::glorot(1, cfg.dim, ainit);
    agg.stack = tf::TransformerParams<float>::init(cfg.dim, cfg.agg_layers, cfg.heads, cfg.ffn,
                                                   ainit.derive("stack"));
    for (const auto& t : cohort.tasks) {
        agg.head_w.push_back(nd::HostTensor<float>::glorot(cfg.dim, t.head_width(), ainit));
        agg.head_b.push_back(nd::HostTensor<float>::zeros({1, t.head_width()}));
    }

    std::vector<nd::HostTensor<float>*> tensors;
    auto collect = [&](const char*, nd::HostTensor<float>& t) { tensors.push_back(&t); };
    enc.params_.for_each(collect);
    agg.for_each(collect);
    nd::Adam<float> adam;

    Rng order_rng = root.derive("batch_order");
    Rng sample_rng = root.derive("event_sampling");
    size_t cursor = 0;
    std::vector<size_t> order(cohort.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    order_rng.shuffle(order);

    for (int step = 0; step < cfg.steps; ++step) {
        nd::Graph<float> g;
        tf::ParamLeaves<float> L(g);
        L.register_component(enc.params_, true);
        L.register_component(agg, true);
        trainer::LossBuilder<float> lb(g, cohort.tasks);

        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor >= order.size()) {
                cursor = 0;
                order_rng.shuffle(order);
            }
            const auto& s = cohort.samples[order[cursor++]];
            if (s.events.empty()) continue;
            // uniform sample (without replacement) from the entire history,
            // not just the most recent events
            int n = int(s.events.size());
            int take = std::min(cfg.events_per_step, n);
            std::vector<int> pick(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) pick[size_t(i)] = i;
            for (int i = 0; i < take; ++i) {
                int j = i + int(sample_rng.uniform_int(uint64_t(n - i)));
                std::swap(pick[size_t(i)], pick[size_t(j)]);
            }
            pick.resize(size_t(take));
            std::sort(pick.begin(), pick.end());

            nd::Graph<float>::Id evmat = -1;
            std::vector<float> tfeat(size_t(take) * size_t(cfg.d_time));
            for (int i = 0; i < take; ++i) {
                const auto& e = s.events[size_t(pick[size_t(i)])];
                auto v = encode_event_node(g, L, enc.params_, token_ids(events::textualize(e), cfg.vocab, cfg.max_tokens));
                evmat = i == 0 ? v : g.concat(evmat, v, 0);
                retriever::time_features(float(e.t), float(s.prediction_time), cfg.d_time,
                                         tfeat.data() + int64_t(i) * cfg.d_time);
            }
            auto tnode = g.matmul(g.constant({take, cfg.d_time}, tfeat), L(agg.time_w));
            auto seq = g.concat(L(agg.cls), g.add(evmat, tnode), 0);
            auto y = tf::build_stack(g, L, agg.stack, seq);
            std::vector<float> sel(size_t(take) + 1, 0.0f);
            sel[0] = 1.0f;
            auto cls_out = g.matmul(g.constant({1, take + 1}, sel), y);
            std::vector<nd::Graph<float>::Id> logits;
            for (size_t t = 0; t < agg.head_w.size(); ++t)
                logits.push_back(g.add(g.matmul(cls_out, L(agg.head_w[t])), L(agg.head_b[t])));
            lb.add_sample(logits, s.labels, false);
        }
        if (lb.empty()) continue;
        auto loss = lb.finalize();
        if (!std::isfinite(double(g.value(loss)[0])))
            throw nd::GraphError("trained encoder: loss diverged (seed " + std::to_string(cfg.seed) + ")");
        g.backward(loss);

        std::vector<std::vector<float>> grads;
        size_t ti = 0;
        auto pull = [&](const char*, nd::HostTensor<float>& t) {
            auto gr = g.grad(L(t));
            grads.emplace_back(gr.begin(), gr.end());
            ++ti;
        };
        enc.params_.for_each(pull);
        agg.for_each(pull);
        adam.step(tensors, grads, cfg.learning_rate);
    }

    // fingerprint over the frozen event-level parameters
    std::string blob = "trained|dim=" + std::to_string(cfg.dim);
    enc.params_.for_each([&](const char* name, nd::HostTensor<float>& t) {
        blob += name;
        blob.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    });
    enc.fingerprint_ = fnv1a64(blob);
    return enc;
}

void TrainedEncoder::encode(std::string_view text, float* out) const {
    auto& self = const_cast<TrainedEncoder&>(*this);
    nd::Graph<float> g;
    tf::ParamLeaves<float> L(g);
    L.register_component(self.params_, false);
    auto v = encode_event_node(g, L, self.params_, token_ids(text, cfg_.vocab, cfg_.max_tokens));
    auto vals = g.value(v);
    // unit length, same scale contract as the hash encoder
    double norm = 0;
    for (float x : vals) norm += double(x) * double(x);
    float inv = norm > 0 ? float(1.0 / std::sqrt(norm)) : 0.0f;
    for (size_t i = 0; i < vals.size(); ++i) out[i] = vals[i] * inv;
}

std::vector<float> TrainedEncoder::encode(std::string_view text) const {
    std::vector<float> v(size_t(cfg_.dim));
    encode(text, v.data());
    return v;
}

VectorCache encode_cohort(const events::Cohort& cohort, const AnyEncoder& enc) {
    VectorCache cache;
    cache.dim = enc.dim();
    cache.encoder_fingerprint = enc.fingerprint();
    cache.offsets.reserve(cohort.samples.size() + 1);
    int64_t rows = 0;
    cache.offsets.push_back(0);
    for (const auto& s : cohort.samples) {
        rows += int64_t(s.events.size());
        cache.offsets.push_back(rows);
    }
    cache.data.resize(size_t(rows) * size_t(cache.dim));
    for (size_t i = 0; i < cohort.samples.size(); ++i) {
        const auto& s = cohort.samples[i];
        for (size_t e = 0; e < s.events.size(); ++e) {
            float* out = cache.data.data() + (cache.offsets[i] + int64_t(e)) * cache.dim;
            enc.encode(events::textualize(s.events[e]), out);
        }
    }
    return cache;
}

void VectorCache::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw nd::GraphError("cannot write cache file: " + path);
    json header;
    header["format_version"] = 1;
    header["dim"] = dim;
    char fp[17];
    std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(encoder_fingerprint));
    header["encoder_fingerprint"] = fp;
    header["offsets"] = offsets;
    std::string hs = header.dump();
    uint32_t magic = 0x31435652;  // "RVC1"
    auto hlen = uint32_t(hs.size());
    out.write(reinterpret_cast<const char*>(&magic), 4);
    out.write(reinterpret_cast<const char*>(&hlen), 4);
    out.write(hs.data(), std::streamsize(hs.size()));
    out.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size() * sizeof(float)));
    if (!out) throw nd::GraphError("cache write failed: " + path);
}

VectorCache VectorCache::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw nd::GraphError("cannot open cache file: " + path);
    uint32_t magic = 0, hlen = 0;
    in.read(reinterpret_cast<char*>(&magic), 4);
    in.read(reinterpret_cast<char*>(&hlen), 4);
    if (!in || magic != 0x31435652) throw nd::GraphError("bad cache file magic: " + path);
    std::string hs(hlen, '\0');
    in.read(hs.data(), hlen);
    json header = json::parse(hs);
    if (header.value("format_version", -1) != 1) throw nd::GraphError("unsupported cache version");
    VectorCache cache;
    cache.dim = header.at("dim").get<int>();
    cache.encoder_fingerprint =
        std::stoull(header.at("encoder_fingerprint").get<std::string>(), nullptr, 16);
    cache.offsets = header.at("offsets").get<std::vector<int64_t>>();
    cache.data.resize(size_t(cache.rows()) * size_t(cache.dim));
    in.read(reinterpret_cast<char*>(cache.data.data()),
            std::streamsize(cache.data.size() * sizeof(float)));
    if (!in) throw nd::GraphError("cache file truncated: " + path);
    return cache;
}

}  // namespace remed::encoder
