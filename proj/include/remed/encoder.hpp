#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "remed/events.hpp"
#include "remed/graph.hpp"
#include "remed/rng.hpp"
#include "remed/transformer.hpp"

namespace remed::encoder {

uint64_t fnv1a64(std::string_view s);

// lowercase alphanumeric runs; everything else separates tokens
std::vector<std::string> tokenize(std::string_view text);

struct HashEncoderConfig {
    int dim{64};
    int buckets{4096};
    uint64_t seed{0x5eed};
};

// Deterministic stand-in for a frozen pre-trained text encoder: signed token
// hashing into buckets, fixed seeded random projection to dim, L2-normalized.
class HashEncoder {
public:
    explicit HashEncoder(const HashEncoderConfig& cfg);

    void encode(std::string_view text, float* out) const;
    std::vector<float> encode(std::string_view text) const;

    int dim() const { return cfg_.dim; }
    const HashEncoderConfig& config() const { return cfg_; }
    uint64_t fingerprint() const { return fingerprint_; }

private:
    HashEncoderConfig cfg_;
    std::vector<float> proj_;  // buckets x dim
    uint64_t fingerprint_{0};
};

struct TrainedEncoderConfig {
    int dim{64};
    int vocab{2048};
    int max_tokens{24};
    int layers{1};
    int heads{4};
    int ffn{128};
    int d_time{9};
    int agg_layers{1};
    int events_per_step{128};  // aggregator input, uniformly sampled from the whole history
    int batch_size{4};
    int steps{400};
    double learning_rate{1e-3};
    uint64_t seed{1};
};

// GenHPF-style two-transformer model: an event-level encoder over the tokens
// of each textualized event and an aggregator over sampled events, trained
// end-to-end on the supervised tasks. After training only the event-level
// transformer survives, frozen, as the vector encoder.
class TrainedEncoder {
public:
    static TrainedEncoder train(const events::Cohort& train_split, const TrainedEncoderConfig& cfg);

    void encode(std::string_view text, float* out) const;
    std::vector<float> encode(std::string_view text) const;

    int dim() const { return cfg_.dim; }
    uint64_t fingerprint() const { return fingerprint_; }
    const TrainedEncoderConfig& config() const { return cfg_; }

    struct EventLevelParams {
        nd::HostTensor<float> tok_embed;  // vocab x dim
        nd::HostTensor<float> pos_embed;  // max_tokens x dim
        nd::HostTensor<float> cls;
        tf::TransformerParams<float> stack;

        template <typename F>
        void for_each(F&& fn) {
            fn("enc.tok_embed", tok_embed);
            fn("enc.pos_embed", pos_embed);
            fn("enc.cls", cls);
            stack.for_each_prefixed("enc", fn);
        }
    };

private:
    TrainedEncoder() = default;

    TrainedEncoderConfig cfg_;
    EventLevelParams params_;
    uint64_t fingerprint_{0};
};

// Tagged union over the two encoder kinds.
class AnyEncoder {
public:
    explicit AnyEncoder(HashEncoder h) : hash_(std::make_shared<HashEncoder>(std::move(h))) {}
    explicit AnyEncoder(TrainedEncoder t) : trained_(std::make_shared<TrainedEncoder>(std::move(t))) {}

    void encode(std::string_view text, float* out) const {
        if (hash_)
            hash_->encode(text, out);
        else
            trained_->encode(text, out);
    }
    int dim() const { return hash_ ? hash_->dim() : trained_->dim(); }
    uint64_t fingerprint() const { return hash_ ? hash_->fingerprint() : trained_->fingerprint(); }
    bool is_hash() const { return hash_ != nullptr; }
    const HashEncoder* hash() const { return hash_.get(); }

private:
    std::shared_ptr<HashEncoder> hash_;
    std::shared_ptr<TrainedEncoder> trained_;
};

// Whole-cohort vector cache, row-major by (sample, event).
struct VectorCache {
    int dim{0};
    uint64_t encoder_fingerprint{0};
    std::vector<int64_t> offsets;  // per-sample first row, plus end sentinel
    std::vector<float> data;

    int64_t rows() const { return offsets.empty() ? 0 : offsets.back(); }
    const float* row(int sample, int64_t event) const {
        return data.data() + (offsets[size_t(sample)] + event) * dim;
    }

    void save(const std::string& path) const;
    static VectorCache load(const std::string& path);
};

VectorCache encode_cohort(const events::Cohort& cohort, const AnyEncoder& enc);

}  // namespace remed::encoder
