#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "carrygpt/base_model.hpp"
#include "carrygpt/nn.hpp"
#include "carrygpt/quantize.hpp"
#include "carrygpt/serialize.hpp"

namespace carrygpt {

enum class FusionMode { none, add_projected, average };

inline std::string fusion_name(FusionMode m) {
    switch (m) {
        case FusionMode::none: return "none";
        case FusionMode::add_projected: return "add_projected";
        default: return "average";
    }
}

inline FusionMode fusion_from_name(const std::string& s) {
    if (s == "none") return FusionMode::none;
    if (s == "add_projected") return FusionMode::add_projected;
    if (s == "average") return FusionMode::average;
    throw ConfigError("unknown fusion mode: " + s);
}

struct MoeSpec {
    int experts = 4;
    int top_k = 2;
    int expert_hidden = 64;
    double router_dropout_start = 0.5;
    double router_dropout_end = 0.1;
};

struct FfnSpec {
    bool is_moe = false;
    int hidden = 256; // dense
    MoeSpec moe;
};

struct HeadSpec {
    bool reuse_base = false;
    int bottleneck = 0; // 0 = direct vocab projection
};

struct BaseRef {
    std::string id;
    double weight = 1.0;
    int dim = 0;    // embedding width of that base
    int layers = 0; // tap depth of x^L for that base
};

struct CarryOnConfig {
    int d_carry = 64;
    int layers = 2;
    int heads = 4;
    FfnSpec ffn;
    FusionMode fusion = FusionMode::none;
    std::vector<int> shallow_depths;
    std::vector<BaseRef> bases;
    HeadSpec head;
    double alpha_init = 0.1;
    int vocab_size = kVocabSize;

    void validate() const {
        if (d_carry < 1) throw ConfigError("carryon config: d_carry must be positive");
        if (layers < 0) throw ConfigError("carryon config: layers must be >= 0");
        if (layers > 0 && (heads < 1 || d_carry % heads != 0))
            throw ConfigError("carryon config: d_carry not divisible by heads");
        if (ffn.is_moe) {
            if (ffn.moe.experts < 1 || ffn.moe.top_k < 1 || ffn.moe.top_k > ffn.moe.experts)
                throw ConfigError("carryon config: need 1 <= top_k <= experts");
            if (ffn.moe.router_dropout_start < 0 || ffn.moe.router_dropout_start >= 1 ||
                ffn.moe.router_dropout_end < 0 || ffn.moe.router_dropout_end >= 1)
                throw ConfigError("carryon config: router dropout must be in [0, 1)");
        }
        if (bases.empty()) throw ConfigError("carryon config: at least one base required");
        double wsum = 0;
        for (const auto& b : bases) {
            if (b.dim < 1 || b.layers < 1) throw ConfigError("carryon config: base " + b.id + " missing dim/layers");
            wsum += b.weight;
        }
        if (std::abs(wsum - 1.0) > 1e-9) throw ConfigError("carryon config: base mixing weights must sum to 1");
        if (head.reuse_base) {
            if (bases.size() != 1) throw ConfigError("carryon config: head reuse requires a single base");
            if (bases[0].dim != d_carry)
                throw ConfigError("carryon config: head reuse requires d_carry == base dim");
        }
        if (alpha_init < 0) throw ConfigError("carryon config: alpha_init must be nonnegative");
        for (int s : shallow_depths)
            for (const auto& b : bases)
                if (s < 0 || s > b.layers)
                    throw ConfigError("carryon config: shallow depth " + std::to_string(s) + " outside base " + b.id);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["d_carry"] = d_carry;
        j["layers"] = layers;
        j["heads"] = heads;
        if (ffn.is_moe) {
            j["ffn"] = {{"type", "moe"},
                        {"experts", ffn.moe.experts},
                        {"top_k", ffn.moe.top_k},
                        {"expert_hidden", ffn.moe.expert_hidden},
                        {"router_dropout_start", ffn.moe.router_dropout_start},
                        {"router_dropout_end", ffn.moe.router_dropout_end}};
        } else {
            j["ffn"] = {{"type", "dense"}, {"hidden", ffn.hidden}};
        }
        j["fusion"] = fusion_name(fusion);
        j["shallow_depths"] = shallow_depths;
        nlohmann::json jb = nlohmann::json::array();
        for (const auto& b : bases)
            jb.push_back({{"id", b.id}, {"weight", b.weight}, {"dim", b.dim}, {"layers", b.layers}});
        j["bases"] = jb;
        if (head.reuse_base)
            j["head"] = {{"type", "reuse_base"}};
        else
            j["head"] = {{"type", "new"}, {"bottleneck", head.bottleneck}};
        j["alpha_init"] = alpha_init;
        j["vocab_size"] = vocab_size;
        return j;
    }

    static CarryOnConfig from_json(const nlohmann::json& j) {
        CarryOnConfig c;
        c.d_carry = j.at("d_carry").get<int>();
        c.layers = j.at("layers").get<int>();
        c.heads = j.value("heads", 1);
        const auto& jf = j.at("ffn");
        if (jf.at("type") == "moe") {
            c.ffn.is_moe = true;
            c.ffn.moe.experts = jf.at("experts").get<int>();
            c.ffn.moe.top_k = jf.at("top_k").get<int>();
            c.ffn.moe.expert_hidden = jf.at("expert_hidden").get<int>();
            c.ffn.moe.router_dropout_start = jf.value("router_dropout_start", 0.5);
            c.ffn.moe.router_dropout_end = jf.value("router_dropout_end", 0.1);
        } else {
            c.ffn.is_moe = false;
            c.ffn.hidden = jf.at("hidden").get<int>();
        }
        c.fusion = fusion_from_name(j.value("fusion", "none"));
        c.shallow_depths = j.value("shallow_depths", std::vector<int>{});
        for (const auto& jb : j.at("bases")) {
            BaseRef b;
            b.id = jb.at("id").get<std::string>();
            b.weight = jb.at("weight").get<double>();
            b.dim = jb.at("dim").get<int>();
            b.layers = jb.at("layers").get<int>();
            c.bases.push_back(std::move(b));
        }
        const auto& jh = j.at("head");
        c.head.reuse_base = jh.at("type") == "reuse_base";
        if (!c.head.reuse_base) c.head.bottleneck = jh.value("bottleneck", 0);
        c.alpha_init = j.value("alpha_init", 0.1);
        c.vocab_size = j.value("vocab_size", kVocabSize);
        c.validate();
        return c;
    }

    static BaseRef ref_of(const BaseModel& m, const std::string& id, double weight = 1.0) {
        return BaseRef{id, weight, m.cfg.dim, m.cfg.layers};
    }
};

// One sequence's dequantized taps, keyed by base id then depth.
struct TapSet {
    std::map<std::string, std::map<int, Tensor>> taps;

    const Tensor& at(const std::string& base, int depth) const {
        auto bi = taps.find(base);
        if (bi == taps.end()) throw DataError("tap set missing base " + base);
        auto di = bi->second.find(depth);
        if (di == bi->second.end())
            throw DataError("tap set missing depth " + std::to_string(depth) + " for base " + base);
        return di->second;
    }
};

// The trainable network stacked on the frozen base: per-source alignment,
// a causal transformer trunk (dense or MoE FFNs), sigmoid gate and main
// heads, and the alpha-rescaled residual into vocabulary logits.
class CarryOnModel {
public:
    CarryOnConfig cfg;
    ParamStore params;
    double alpha = 0.1;

    static CarryOnModel init(const CarryOnConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        CarryOnModel m;
        m.cfg = cfg;
        m.alpha = cfg.alpha_init;
        m.seed_ = seed;
        Rng rng(seed);
        const Real std = Real(0.02);
        for (const auto& b : cfg.bases) {
            // deep alignment starts as identity when square so training
            // begins at the raw base embedding
            Tensor w = b.dim == cfg.d_carry ? Tensor::identity(b.dim)
                                            : Tensor::randn({b.dim, cfg.d_carry}, std, rng);
            m.params.add("align.deep." + b.id, std::move(w));
            for (int s : cfg.shallow_depths)
                m.params.add("align.shallow." + b.id + "." + std::to_string(s),
                             Tensor::zeros({b.dim, cfg.d_carry}));
        }
        for (int l = 0; l < cfg.layers; ++l) {
            const std::string prefix = "layer" + std::to_string(l);
            m.attn_.push_back(AttentionBlock::create(m.params, prefix, cfg.d_carry, cfg.heads, std, rng));
            if (cfg.ffn.is_moe) {
                m.params.add(prefix + ".ffn_norm.gain", Tensor::full({1, cfg.d_carry}, Real(1)));
                m.params.add(prefix + ".moe.router", Tensor::randn({cfg.d_carry, cfg.ffn.moe.experts}, std, rng));
                for (int e = 0; e < cfg.ffn.moe.experts; ++e) {
                    const std::string ep = prefix + ".moe.expert" + std::to_string(e);
                    m.params.add(ep + ".w1", Tensor::randn({cfg.d_carry, cfg.ffn.moe.expert_hidden}, std, rng));
                    m.params.add(ep + ".w2", Tensor::randn({cfg.ffn.moe.expert_hidden, cfg.d_carry}, std, rng));
                }
            } else {
                m.ffn_.push_back(DenseFfn::create(m.params, prefix, cfg.d_carry, cfg.ffn.hidden, std, rng));
            }
        }
        // gate starts at 0.5 everywhere; the main head starts small so early
        // training stays near the base model
        m.params.add("gate.w", Tensor::zeros({cfg.d_carry, cfg.d_carry}));
        m.params.add("gate.b", Tensor::zeros({1, cfg.d_carry}));
        m.params.add("main.w", Tensor::randn({cfg.d_carry, cfg.d_carry}, std, rng));
        if (!cfg.head.reuse_base) {
            const int mid = cfg.head.bottleneck > 0 ? cfg.head.bottleneck : cfg.d_carry;
            if (cfg.head.bottleneck > 0)
                m.params.add("head.bottleneck", Tensor::randn({cfg.d_carry, cfg.head.bottleneck}, std, rng));
            m.params.add("head.vocab", Tensor::randn({mid, cfg.vocab_size}, std, rng));
        }
        return m;
    }

    // deep = sum_i w_i * align_i(x^L_i); fusion folds shallow taps in.
    Tensor fuse_inputs(const TapSet& taps) const {
        int n = -1;
        for (const auto& [base_id, by_depth] : taps.taps)
            for (const auto& [depth, t] : by_depth) {
                if (n < 0) n = t.rows();
                if (t.rows() != n)
                    throw DataError("fuse_inputs: tap " + base_id + "@" + std::to_string(depth) + " has " +
                                    std::to_string(t.rows()) + " rows, expected " + std::to_string(n));
            }
        Tensor deep;
        for (const auto& b : cfg.bases) {
            const Tensor& raw = taps.at(b.id, b.layers);
            Tensor aligned = matmul(raw, params.at("align.deep." + b.id).value);
            if (b.weight != 1.0) aligned = mul_scalar(aligned, static_cast<Real>(b.weight));
            deep = deep.defined() ? add(deep, aligned) : aligned;
        }
        if (cfg.fusion == FusionMode::none || cfg.shallow_depths.empty()) return deep;
        Tensor shallow_sum;
        int shallow_count = 0;
        for (const auto& b : cfg.bases) {
            for (int s : cfg.shallow_depths) {
                const Tensor aligned =
                    matmul(taps.at(b.id, s), params.at("align.shallow." + b.id + "." + std::to_string(s)).value);
                shallow_sum = shallow_sum.defined() ? add(shallow_sum, aligned) : aligned;
                ++shallow_count;
            }
        }
        if (cfg.fusion == FusionMode::add_projected) return add(deep, shallow_sum);
        // average of the deep mix and every aligned shallow stream
        return mul_scalar(add(deep, shallow_sum), Real(1) / static_cast<Real>(1 + shallow_count));
    }

    // Router scores with (seeded) dropout, top-k selection, softmax over
    // the selected scores, convex mix of expert outputs.
    Tensor moe_ffn(const Tensor& x, int layer, bool train_mode, double dropout_p, std::uint64_t rng_seed) const {
        const MoeSpec& moe = cfg.ffn.moe;
        const std::string prefix = "layer" + std::to_string(layer) + ".moe";
        Tensor scores = matmul(x, params.at(prefix + ".router").value);
        if (train_mode && dropout_p > 0.0) {
            Rng rng(Rng::mix(rng_seed, 0xd20b, static_cast<std::uint64_t>(layer)));
            Tensor mask = Tensor::zeros(scores.shape());
            const Real keep = Real(1) / static_cast<Real>(1.0 - dropout_p);
            for (auto& v : mask.data()) v = rng.bernoulli(dropout_p) ? Real(0) : keep;
            scores = mul(scores, mask);
        }
        const int n = scores.rows(), e = scores.cols();
        Tensor select = Tensor::zeros({n, e});
        for (int i = 0; i < n; ++i) {
            // rank by score desc, index asc; keep the top_k
            std::vector<int> order(static_cast<std::size_t>(e));
            for (int j = 0; j < e; ++j) order[static_cast<std::size_t>(j)] = j;
            std::sort(order.begin(), order.end(), [&](int a, int b) {
                if (scores.at(i, a) != scores.at(i, b)) return scores.at(i, a) > scores.at(i, b);
                return a < b;
            });
            for (int r = moe.top_k; r < e; ++r) select.at(i, order[static_cast<std::size_t>(r)]) = Real(-1e30);
        }
        const Tensor weights = softmax_rows(add(scores, select));
        Tensor out;
        for (int ei = 0; ei < moe.experts; ++ei) {
            const std::string ep = prefix + ".expert" + std::to_string(ei);
            const Tensor hidden = silu(matmul(x, params.at(ep + ".w1").value));
            const Tensor expert_out = matmul(hidden, params.at(ep + ".w2").value);
            const Tensor weighted = mul_rowvec(expert_out, slice_cols(weights, ei, 1));
            out = out.defined() ? add(out, weighted) : weighted;
        }
        return out;
    }

    // `layers` pre-norm causal blocks; layers = 0 is the identity.
    Tensor trunk_forward(const Tensor& x_in, bool train_mode, double dropout_p = 0.0,
                         std::uint64_t rng_seed = 0) const {
        Tensor x = x_in;
        for (int l = 0; l < cfg.layers; ++l) {
            x = attn_[static_cast<std::size_t>(l)].forward(x);
            if (cfg.ffn.is_moe) {
                const Tensor normed =
                    rms_norm(x, params.at("layer" + std::to_string(l) + ".ffn_norm.gain").value, Real(1e-6));
                x = add(x, moe_ffn(normed, l, train_mode, dropout_p, rng_seed));
            } else {
                x = ffn_[static_cast<std::size_t>(l)].forward(x);
            }
        }
        return x;
    }

    // gate = sigmoid(W_g trunk + b); delta = gate .* (W_p trunk);
    // y = head(alpha * delta + x_deep)
    Tensor compose_logits(const Tensor& x_deep, const Tensor& trunk_out, const Tensor& alpha_t,
                          const BaseModel* head_base) const {
        if (alpha_t.data()[0] < Real(0)) throw ConfigError("compose_logits: alpha must be nonnegative");
        const Tensor gate = sigmoid(add_bias(matmul(trunk_out, params.at("gate.w").value), params.at("gate.b").value));
        const Tensor delta = mul(gate, matmul(trunk_out, params.at("main.w").value));
        const Tensor z = add(scale_by(delta, alpha_t), x_deep);
        if (cfg.head.reuse_base) {
            if (head_base == nullptr) throw ConfigError("compose_logits: head reuse requires the base model");
            return head_base->logits_from_stream(z);
        }
        Tensor h = z;
        if (cfg.head.bottleneck > 0) h = matmul(h, params.at("head.bottleneck").value);
        return matmul(h, params.at("head.vocab").value);
    }

    struct ForwardOptions {
        bool train_mode = false;
        double dropout_p = 0.0;
        std::uint64_t rng_seed = 0;
        const BaseModel* head_base = nullptr;
    };

    // Full carry-on pass over one sequence's taps.
    Tensor forward_logits(const TapSet& taps, const Tensor& alpha_t, const ForwardOptions& opt) const {
        const Tensor fused = fuse_inputs(taps);
        const Tensor trunk_out = trunk_forward(fused, opt.train_mode, opt.dropout_p, opt.rng_seed);
        // head reuse adds the residual in base dimension on the raw tap;
        // a new head adds it in carry dimension on the fused stream
        const Tensor x_deep = cfg.head.reuse_base ? taps.at(cfg.bases[0].id, cfg.bases[0].layers) : fused;
        return compose_logits(x_deep, trunk_out, alpha_t, opt.head_base);
    }

    Tensor alpha_tensor() const { return Tensor::scalar(static_cast<Real>(alpha)); }

    std::vector<int> needed_depths() const {
        std::vector<int> depths;
        for (const auto& b : cfg.bases) depths.push_back(b.layers);
        for (int s : cfg.shallow_depths) depths.push_back(s);
        std::sort(depths.begin(), depths.end());
        depths.erase(std::unique(depths.begin(), depths.end()), depths.end());
        return depths;
    }

    void save(const std::string& path, const nlohmann::json& extra = {}) const {
        nlohmann::json j;
        j["kind"] = "carryon";
        j["config"] = cfg.to_json();
        j["alpha"] = alpha;
        j["seed"] = seed_;
        for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
        save_model_file(path, j, params);
    }

    static CarryOnModel load(const std::string& path) {
        const ModelFile mf = load_model_file(path);
        if (mf.config.value("kind", "") != "carryon") throw IoError("not a carry-on model file: " + path);
        CarryOnModel m = init(CarryOnConfig::from_json(mf.config.at("config")),
                              mf.config.value("seed", std::uint64_t{0}));
        m.alpha = mf.config.value("alpha", m.cfg.alpha_init);
        load_into_store(mf, m.params);
        return m;
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::vector<AttentionBlock> attn_;
    std::vector<DenseFfn> ffn_;
    std::uint64_t seed_ = 0;
};

// Local bridge application: quantize -> dequantize every requested tap,
// exactly what the wire path produces on the training side.
inline TapSet local_taps(const BaseModel& base, const std::string& base_id, const TokenSequence& seq,
                         const std::vector<int>& depths, int bits) {
    TapSet out;
    for (const auto& tap : base.forward_taps(seq, depths))
        out.taps[base_id][tap.depth] = quantize_roundtrip(tap.values, bits);
    return out;
}

} // namespace carrygpt
