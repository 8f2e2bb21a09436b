#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "carrygpt/nn.hpp"
#include "carrygpt/optimizer.hpp"
#include "carrygpt/serialize.hpp"
#include "carrygpt/tokenizer.hpp"

namespace carrygpt {

struct BaseConfig {
    int vocab_size = kVocabSize;
    int dim = 64;
    int layers = 4;
    int heads = 4;
    int max_seq = 256;
    std::uint64_t seed = 1;

    void validate() const {
        if (vocab_size < 2) throw ConfigError("base config: vocab_size must be >= 2");
        if (layers < 2) throw ConfigError("base config: layers must be >= 2 so a shallow tap exists");
        if (heads < 1 || dim % heads != 0)
            throw ConfigError("base config: dim " + std::to_string(dim) + " not divisible by heads " +
                              std::to_string(heads));
        if (max_seq < 2) throw ConfigError("base config: max_seq must be >= 2");
    }

    nlohmann::json to_json() const {
        return {{"kind", "base"},   {"vocab_size", vocab_size}, {"dim", dim},   {"layers", layers},
                {"heads", heads},   {"max_seq", max_seq},       {"seed", seed}};
    }

    static BaseConfig from_json(const nlohmann::json& j) {
        BaseConfig c;
        c.vocab_size = j.at("vocab_size").get<int>();
        c.dim = j.at("dim").get<int>();
        c.layers = j.at("layers").get<int>();
        c.heads = j.at("heads").get<int>();
        c.max_seq = j.at("max_seq").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.validate();
        return c;
    }
};

// Residual-stream embedding at one depth. Depth 0 is the token+position
// embedding; depth L is the final-norm output fed to the projection head.
struct LayerTap {
    int depth = 0;
    Tensor values;
};

// Small decoder-only transformer LM. Pretrained in-repo, then frozen; the
// carry-on pipeline only ever reads its layer taps and output head.
class BaseModel {
public:
    BaseConfig cfg;
    ParamStore params;

    static BaseModel init(const BaseConfig& cfg) {
        cfg.validate();
        BaseModel m;
        m.cfg = cfg;
        Rng rng(cfg.seed);
        const Real std = Real(0.02);
        m.params.add("wte", Tensor::randn({cfg.vocab_size, cfg.dim}, std, rng));
        m.params.add("wpe", Tensor::randn({cfg.max_seq, cfg.dim}, std, rng));
        for (int l = 0; l < cfg.layers; ++l) {
            const std::string prefix = "layer" + std::to_string(l);
            m.attn_.push_back(AttentionBlock::create(m.params, prefix, cfg.dim, cfg.heads, std, rng));
            m.ffn_.push_back(DenseFfn::create(m.params, prefix, cfg.dim, 4 * cfg.dim, std, rng));
        }
        m.params.add("final_norm.gain", Tensor::full({1, cfg.dim}, Real(1)));
        m.params.add("w_output", Tensor::randn({cfg.dim, cfg.vocab_size}, std, rng));
        return m;
    }

    void save(const std::string& path) const { save_model_file(path, cfg.to_json(), params); }

    static BaseModel load(const std::string& path) {
        const ModelFile mf = load_model_file(path);
        if (mf.config.value("kind", "") != "base") throw IoError("not a base model file: " + path);
        BaseModel m = init(BaseConfig::from_json(mf.config));
        load_into_store(mf, m.params);
        m.freeze();
        return m;
    }

    void freeze() {
        params.freeze_all();
        frozen_ = true;
    }
    bool frozen() const { return frozen_; }

    const Tensor& output_head() const { return params.at("w_output").value; }

    // One forward pass; returns the residual stream after each depth
    // 0..layers. The same buffers feed the logits head, so taps and logits
    // never diverge by recomputation. pos_offset shifts the learned
    // position rows (used during pretraining so every row gets trained).
    std::vector<Tensor> forward_streams(const TokenSequence& seq, int pos_offset = 0) const {
        seq.validate(cfg.vocab_size, cfg.max_seq - pos_offset);
        const int n = static_cast<int>(seq.size());
        std::vector<int> positions(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i + pos_offset;
        std::vector<Tensor> streams;
        streams.reserve(static_cast<std::size_t>(cfg.layers) + 1);
        Tensor x = add(embedding_rows(params.at("wte").value, seq.ids),
                       embedding_rows(params.at("wpe").value, positions));
        streams.push_back(x);
        for (int l = 0; l < cfg.layers; ++l) {
            x = attn_[static_cast<std::size_t>(l)].forward(x);
            x = ffn_[static_cast<std::size_t>(l)].forward(x);
            if (l + 1 < cfg.layers) streams.push_back(x);
        }
        streams.push_back(rms_norm(x, params.at("final_norm.gain").value, Real(1e-6)));
        return streams;
    }

    std::vector<LayerTap> forward_taps(const TokenSequence& seq, const std::vector<int>& depths) const {
        for (int d : depths)
            if (d < 0 || d > cfg.layers)
                throw ConfigError("tap depth " + std::to_string(d) + " outside [0, " + std::to_string(cfg.layers) + "]");
        const std::vector<Tensor> streams = forward_streams(seq);
        std::vector<LayerTap> taps;
        taps.reserve(depths.size());
        for (int d : depths) taps.push_back(LayerTap{d, streams[static_cast<std::size_t>(d)]});
        return taps;
    }

    Tensor logits_from_stream(const Tensor& top_stream) const {
        return matmul(top_stream, params.at("w_output").value);
    }

    Tensor base_logits(const TokenSequence& seq) const {
        return logits_from_stream(forward_streams(seq).back());
    }

private:
    std::vector<AttentionBlock> attn_;
    std::vector<DenseFfn> ffn_;
    bool frozen_ = false;
};

struct PretrainOptions {
    std::int64_t steps = 2000;
    Real lr = Real(3e-3);
    int batch_size = 8;
    int seq_len = 96;
    std::int64_t warmup_steps = 100;
    Real lr_floor_ratio = Real(0.05);
    Real weight_decay = Real(0.01);
    std::uint64_t data_seed = 7;
    std::function<void(std::int64_t, Real, Real)> on_step; // (step, loss, lr)
};

// Trains all parameters with AdamW + cosine warmup on contiguous windows of
// the byte-tokenized corpus, then freezes the model.
inline BaseModel pretrain_base(const std::string& corpus, const BaseConfig& cfg, const PretrainOptions& opt = {}) {
    BaseModel model = BaseModel::init(cfg);
    const std::vector<int> tokens = encode_bytes(corpus);
    const int window = std::min(opt.seq_len, cfg.max_seq - 1);
    if (static_cast<int>(tokens.size()) < (window + 1) * opt.batch_size)
        throw DataError("pretrain corpus shorter than one batch (" + std::to_string(tokens.size()) + " tokens, need " +
                        std::to_string((window + 1) * opt.batch_size) + ")");
    AdamW optimizer(model.params, AdamWConfig{Real(0.9), Real(0.95), Real(1e-8), opt.weight_decay});
    Rng data_rng(Rng::mix(cfg.seed, opt.data_seed, 0xba5e));
    const std::int64_t warmup = std::min<std::int64_t>(opt.warmup_steps, opt.steps > 1 ? opt.steps - 1 : 0);
    for (std::int64_t step = 0; step < opt.steps; ++step) {
        optimizer.zero_grad();
        Tensor total;
        for (int b = 0; b < opt.batch_size; ++b) {
            const std::size_t offset = data_rng.below(tokens.size() - static_cast<std::size_t>(window) - 1);
            const int pos_offset = static_cast<int>(data_rng.below(static_cast<std::uint64_t>(cfg.max_seq - window)));
            TokenSequence seq;
            seq.ids.assign(tokens.begin() + static_cast<std::ptrdiff_t>(offset),
                           tokens.begin() + static_cast<std::ptrdiff_t>(offset) + window + 1);
            const Tensor logits = model.logits_from_stream(model.forward_streams(seq.inputs(), pos_offset).back());
            const Tensor loss = cross_entropy_next_token(logits, seq.targets(), 0);
            total = b == 0 ? loss : add(total, loss);
        }
        const Tensor mean_loss = mul_scalar(total, Real(1) / static_cast<Real>(opt.batch_size));
        mean_loss.backward();
        const Real lr = cosine_warmup_lr(step, warmup, opt.steps, opt.lr, opt.lr * opt.lr_floor_ratio);
        optimizer.step(lr);
        if (opt.on_step) opt.on_step(step, mean_loss.data()[0], lr);
    }
    model.freeze();
    return model;
}

} // namespace carrygpt
