#pragma once

#include <chrono>
#include <memory>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "carrygpt/alpha.hpp"
#include "carrygpt/carryon.hpp"
#include "carrygpt/optimizer.hpp"

namespace carrygpt {

// Where dequantized taps come from: the local frozen base or the wire.
// Both apply the same quantize -> dequantize bridge, so swapping sources
// cannot change a single bit of the training trajectory.
class TapSource {
public:
    virtual ~TapSource() = default;
    virtual TapSet fetch(const TokenSequence& seq) = 0;
    virtual std::uint64_t bytes_transferred() const { return 0; }
    virtual std::uint64_t fetches() const { return 0; }
};

class LocalTapSource : public TapSource {
public:
    LocalTapSource(const BaseModel& base, std::string base_id, std::vector<int> depths, int bits)
        : base_(&base), base_id_(std::move(base_id)), depths_(std::move(depths)), bits_(bits) {
        if (!quant_bits_allowed(bits)) throw ConfigError("tap source: bad quantization bits");
    }

    TapSet fetch(const TokenSequence& seq) override {
        ++count_;
        return local_taps(*base_, base_id_, seq, depths_, bits_);
    }

    std::uint64_t fetches() const override { return count_; }

private:
    const BaseModel* base_;
    std::string base_id_;
    std::vector<int> depths_;
    int bits_;
    std::uint64_t count_ = 0;
};

// Joint-training source: hands out graph-attached raw taps so gradients
// can reach an unfrozen base. Only meaningful in local mode; the bridge
// (and therefore the wire) never carries gradients.
class GraphTapSource : public TapSource {
public:
    GraphTapSource(const BaseModel& base, std::string base_id, std::vector<int> depths)
        : base_(&base), base_id_(std::move(base_id)), depths_(std::move(depths)) {}

    TapSet fetch(const TokenSequence& seq) override {
        ++count_;
        TapSet out;
        for (const auto& tap : base_->forward_taps(seq, depths_)) out.taps[base_id_][tap.depth] = tap.values;
        return out;
    }

    std::uint64_t fetches() const override { return count_; }

private:
    const BaseModel* base_;
    std::string base_id_;
    std::vector<int> depths_;
    std::uint64_t count_ = 0;
};

struct CurveRow {
    std::int64_t step = 0;
    std::string split; // train | val
    double alpha = 0;
    double loss = 0;
    double lr = 0;
    std::int64_t wallclock_ms = 0;
};

inline void write_curves_csv(const std::string& path, const std::vector<CurveRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write curves csv: " + path);
    out << "step,split,alpha,loss,lr,wallclock_ms\n";
    char buf[192];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%lld,%s,%.17g,%.17g,%.17g,%lld\n", static_cast<long long>(r.step),
                      r.split.c_str(), r.alpha, r.loss, r.lr, static_cast<long long>(r.wallclock_ms));
        out << buf;
    }
}

struct TrainOptions {
    int epochs = 2;
    int batch_size = 8;
    int mask_before = 30;
    int truncate_len = 512;
    Real lr_peak = Real(1e-4);
    std::int64_t warmup_steps = 20;
    Real lr_floor_ratio = Real(0.1);
    Real weight_decay = Real(0);
    AlphaMode alpha_mode = AlphaMode::grid;
    std::uint64_t seed = 1;
    const BaseModel* head_base = nullptr;       // required for head reuse
    std::string checkpoint_path;                // written each epoch and on divergence
    bool verbose = false;
    // joint training (local mode only): unfreezes the base and steps it at
    // its own rate; requires a GraphTapSource so gradients can reach it
    BaseModel* train_base = nullptr;
    Real base_lr = Real(1e-5);
};

struct TrainResult {
    AlphaState alpha_state;
    std::vector<CurveRow> curves;
    double final_val_loss = 0;
    std::int64_t steps = 0;
    std::uint64_t source_bytes = 0;
    double bytes_per_step = 0;
    std::set<std::string> params_touched;
};

namespace detail {

inline int effective_mask(int mask_before, int n_positions) {
    return std::min(mask_before, n_positions - 1);
}

// Per-sequence mean masked cross-entropy, averaged over samples.
inline double val_loss_over(const CarryOnModel& carry, const std::vector<TapSet>& taps,
                            const std::vector<TokenSequence>& seqs, double alpha, int mask_before,
                            const BaseModel* head_base) {
    if (seqs.empty()) throw EvalError("validation stream is empty");
    const Tensor alpha_t = Tensor::scalar(static_cast<Real>(alpha));
    CarryOnModel::ForwardOptions opt;
    opt.train_mode = false;
    opt.head_base = head_base;
    double total = 0;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        const Tensor logits = carry.forward_logits(taps[i], alpha_t, opt);
        const int mask = effective_mask(mask_before, logits.rows());
        total += cross_entropy_next_token(logits, seqs[i].targets(), mask).data()[0];
    }
    return total / static_cast<double>(seqs.size());
}

} // namespace detail

inline TokenSequence truncate_seq(const TokenSequence& s, int cap) {
    if (cap <= 0 || static_cast<int>(s.size()) <= cap) return s;
    TokenSequence t;
    t.ids.assign(s.ids.begin(), s.ids.begin() + cap);
    return t;
}

// Next-token training of the carry-on over a tap source, with per-epoch
// alpha selection on the validation stream. All randomness is seeded here
// on the training side; the source never sees it.
inline TrainResult train_carryon(CarryOnModel& carry, TapSource& source,
                                 const std::vector<TokenSequence>& train_set,
                                 const std::vector<TokenSequence>& val_set, const TrainOptions& opt,
                                 const std::vector<TokenSequence>* general_val = nullptr) {
    if (train_set.empty()) throw DataError("training stream is empty");
    if (val_set.empty()) throw EvalError("validation stream is empty");
    if (carry.cfg.head.reuse_base && opt.head_base == nullptr)
        throw ConfigError("train_carryon: head reuse requires the frozen base for its output head");
    if (opt.head_base != nullptr && !opt.head_base->frozen() && opt.train_base == nullptr)
        throw ConfigError("train_carryon: the base model must be frozen");
    if (opt.alpha_mode == AlphaMode::balance && general_val == nullptr)
        throw ConfigError("train_carryon: balance mode needs a general validation stream");
    if (opt.train_base != nullptr)
        for (std::size_t i = 0; i < opt.train_base->params.size(); ++i)
            opt.train_base->params[i].set_trainable(true);

    const auto t0 = std::chrono::steady_clock::now();
    const auto now_ms = [&] {
        return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    };

    std::vector<TokenSequence> train;
    train.reserve(train_set.size());
    for (const auto& s : train_set) train.push_back(truncate_seq(s, opt.truncate_len));
    std::vector<TokenSequence> val;
    val.reserve(val_set.size());
    for (const auto& s : val_set) val.push_back(truncate_seq(s, opt.truncate_len));

    AdamW optimizer(carry.params, AdamWConfig{Real(0.9), Real(0.95), Real(1e-8), opt.weight_decay});
    std::unique_ptr<AdamW> base_optimizer;
    if (opt.train_base != nullptr)
        base_optimizer = std::make_unique<AdamW>(opt.train_base->params,
                                                 AdamWConfig{Real(0.9), Real(0.95), Real(1e-8), opt.weight_decay});

    const std::int64_t steps_per_epoch =
        static_cast<std::int64_t>((train.size() + static_cast<std::size_t>(opt.batch_size) - 1) /
                                  static_cast<std::size_t>(opt.batch_size));
    const std::int64_t total_steps = std::max<std::int64_t>(1, steps_per_epoch * opt.epochs);
    const std::int64_t warmup = std::min<std::int64_t>(opt.warmup_steps, total_steps - 1);
    const Real lr_floor = opt.lr_peak * opt.lr_floor_ratio;

    TrainResult result;
    result.alpha_state.alpha = carry.alpha;
    result.alpha_state.mode = opt.alpha_mode;

    // Validation taps are fetched once and reused for every alpha candidate;
    // the source is deterministic, so the cache is transparent.
    std::vector<TapSet> val_taps;
    const auto ensure_val_taps = [&] {
        // joint training moves the base between epochs: never cache then
        if (opt.train_base != nullptr) {
            val_taps.clear();
            for (const auto& s : val) val_taps.push_back(source.fetch(s.inputs()));
            return;
        }
        if (!val_taps.empty()) return;
        val_taps.reserve(val.size());
        for (const auto& s : val) val_taps.push_back(source.fetch(s.inputs()));
    };
    std::vector<TapSet> general_taps;
    std::vector<TokenSequence> general;
    if (general_val != nullptr) {
        for (const auto& s : *general_val) general.push_back(truncate_seq(s, opt.truncate_len));
    }
    const auto ensure_general_taps = [&] {
        if (general.empty() || !general_taps.empty()) return;
        general_taps.reserve(general.size());
        for (const auto& s : general) general_taps.push_back(source.fetch(s.inputs()));
    };

    std::vector<Real> last_good = carry.params.flatten_values();
    double last_good_alpha = carry.alpha;
    const auto restore_last_good = [&] {
        std::size_t off = 0;
        for (std::size_t i = 0; i < carry.params.size(); ++i) {
            auto& data = carry.params[i].value.data();
            std::copy(last_good.begin() + static_cast<std::ptrdiff_t>(off),
                      last_good.begin() + static_cast<std::ptrdiff_t>(off + data.size()), data.begin());
            off += data.size();
        }
        carry.alpha = last_good_alpha;
    };

    const bool is_moe = carry.cfg.ffn.is_moe;
    const double p_start = is_moe ? carry.cfg.ffn.moe.router_dropout_start : 0.0;
    const double p_end = is_moe ? carry.cfg.ffn.moe.router_dropout_end : 0.0;

    std::int64_t step = 0;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng perm_rng(Rng::mix(opt.seed, static_cast<std::uint64_t>(epoch), 0xda7a));
        const std::vector<std::size_t> order = perm_rng.permutation(train.size());
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
            optimizer.zero_grad();
            if (base_optimizer) base_optimizer->zero_grad();
            const Tensor alpha_t = Tensor::scalar(static_cast<Real>(carry.alpha));
            const double dropout_p =
                p_start + (p_end - p_start) * (total_steps <= 1 ? 1.0
                                                                : static_cast<double>(step) /
                                                                      static_cast<double>(total_steps - 1));
            Tensor batch_loss;
            for (std::size_t bi = start; bi < end; ++bi) {
                const TokenSequence& seq = train[order[bi]];
                const TapSet taps = source.fetch(seq.inputs());
                CarryOnModel::ForwardOptions fwd;
                fwd.train_mode = true;
                fwd.dropout_p = dropout_p;
                fwd.rng_seed = Rng::mix(opt.seed, static_cast<std::uint64_t>(step), 0xd209 + order[bi]);
                fwd.head_base = opt.head_base;
                const Tensor logits = carry.forward_logits(taps, alpha_t, fwd);
                const int mask = detail::effective_mask(opt.mask_before, logits.rows());
                const Tensor loss = cross_entropy_next_token(logits, seq.targets(), mask);
                batch_loss = batch_loss.defined() ? add(batch_loss, loss) : loss;
            }
            const Tensor mean_loss = mul_scalar(batch_loss, Real(1) / static_cast<Real>(end - start));
            const double loss_value = mean_loss.data()[0];
            if (!std::isfinite(loss_value)) {
                restore_last_good();
                if (!opt.checkpoint_path.empty()) carry.save(opt.checkpoint_path);
                throw OptimError("training diverged at step " + std::to_string(step) +
                                 (opt.checkpoint_path.empty() ? "" : "; last good checkpoint written to " +
                                                                         opt.checkpoint_path));
            }
            mean_loss.backward();
            const Real lr = cosine_warmup_lr(step, warmup, total_steps, opt.lr_peak, lr_floor);
            optimizer.step(lr);
            if (base_optimizer) base_optimizer->step(lr * (opt.base_lr / opt.lr_peak));
            result.curves.push_back(CurveRow{step, "train", carry.alpha, loss_value, lr, now_ms()});
            ++step;
        }

        ensure_val_taps();
        const auto j_val = [&](double a) {
            return detail::val_loss_over(carry, val_taps, val, a, opt.mask_before, opt.head_base);
        };

        AlphaEpochRecord record;
        record.epoch = epoch;
        double epoch_val = 0;
        switch (opt.alpha_mode) {
            case AlphaMode::fixed: {
                epoch_val = j_val(carry.alpha);
                record.candidates.push_back({carry.alpha, epoch_val});
                record.chosen = carry.alpha;
                break;
            }
            case AlphaMode::neighborhood: {
                if (carry.alpha <= 0) {
                    epoch_val = j_val(carry.alpha);
                    record.candidates.push_back({carry.alpha, epoch_val});
                    record.chosen = carry.alpha;
                    break;
                }
                const AlphaSelection sel = select_alpha_neighborhood(carry.alpha, j_val);
                record.candidates = sel.evaluated;
                record.chosen = sel.alpha;
                carry.alpha = sel.alpha;
                for (const auto& c : sel.evaluated)
                    if (c.alpha == sel.alpha) epoch_val = c.j_val;
                break;
            }
            case AlphaMode::grid: {
                const AlphaSelection sel = select_alpha_grid(j_val);
                record.candidates = sel.evaluated;
                record.chosen = sel.alpha;
                carry.alpha = sel.alpha;
                for (const auto& c : sel.evaluated)
                    if (c.alpha == sel.alpha) epoch_val = c.j_val;
                break;
            }
            case AlphaMode::balance: {
                ensure_general_taps();
                const auto j_general = [&](double a) {
                    return detail::val_loss_over(carry, general_taps, general, a, opt.mask_before, opt.head_base);
                };
                const BalanceReport rep = balance_point_search(j_val, j_general);
                for (const auto& p : rep.probes) record.candidates.push_back({p.alpha, p.j_custom});
                record.chosen = rep.alpha;
                carry.alpha = rep.alpha;
                epoch_val = j_val(rep.alpha);
                break;
            }
        }
        result.alpha_state.history.push_back(record);
        result.alpha_state.alpha = carry.alpha;
        result.alpha_state.candidates.clear();
        for (const auto& c : record.candidates) result.alpha_state.candidates.push_back(c.alpha);
        result.curves.push_back(CurveRow{step, "val", carry.alpha, epoch_val, 0.0, now_ms()});
        result.final_val_loss = epoch_val;

        last_good = carry.params.flatten_values();
        last_good_alpha = carry.alpha;
        if (!opt.checkpoint_path.empty()) carry.save(opt.checkpoint_path);
        if (opt.verbose) {
            std::cerr << "epoch " << epoch << ": val_loss=" << epoch_val << " alpha=" << carry.alpha << "\n";
            for (const auto& c : record.candidates)
                std::cerr << "  alpha candidate " << c.alpha << " -> J=" << c.j_val << "\n";
        }
    }

    result.steps = step;
    result.source_bytes = source.bytes_transferred();
    result.bytes_per_step = step > 0 ? static_cast<double>(result.source_bytes) / static_cast<double>(step) : 0.0;
    result.params_touched = optimizer.touched();
    if (base_optimizer)
        result.params_touched.insert(base_optimizer->touched().begin(), base_optimizer->touched().end());
    return result;
}

} // namespace carrygpt
