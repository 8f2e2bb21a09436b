#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "carrygpt/alpha.hpp"
#include "carrygpt/corpus.hpp"
#include "carrygpt/optimizer.hpp"
#include "carrygpt/train.hpp"
#include "testutil.hpp"

using namespace carrygpt;
using testutil::grad_close;

namespace {

BaseModel memo_base(std::uint64_t seed = 21) {
    BaseConfig cfg;
    cfg.dim = 16;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.max_seq = 64;
    cfg.seed = seed;
    BaseModel m = BaseModel::init(cfg);
    m.freeze();
    return m;
}

CarryOnConfig carry_cfg(const BaseModel& base, int layers, int hidden) {
    CarryOnConfig cfg;
    cfg.d_carry = base.cfg.dim;
    cfg.layers = layers;
    cfg.heads = 2;
    cfg.ffn.hidden = hidden;
    cfg.bases = {CarryOnConfig::ref_of(base, "main")};
    cfg.head.reuse_base = true;
    cfg.alpha_init = 0.1;
    return cfg;
}

std::vector<TokenSequence> memo_sequences(int count, std::uint64_t seed) {
    std::vector<TokenSequence> seqs;
    for (const auto& doc : corpus::memorization_docs(count, seed)) {
        TokenSequence s = encode_prompt(doc);
        s.ids.push_back(kEosId);
        seqs.push_back(std::move(s));
    }
    return seqs;
}

} // namespace

TEST_CASE("adamw leaves parameters unchanged on zero gradient without decay") {
    ParamStore store;
    Rng rng(1);
    store.add("w", Tensor::randn({2, 3}, 1.0, rng));
    const std::vector<Real> before = store.flatten_values();
    AdamW opt(store);
    opt.step(Real(0.01));
    CHECK(store.flatten_values() == before);
}

TEST_CASE("adamw first step on unit gradient is minus the learning rate") {
    ParamStore store;
    Param& p = store.add("w", Tensor::scalar(1.0));
    p.value.grad()[0] = Real(1);
    AdamW opt(store, AdamWConfig{Real(0.9), Real(0.95), Real(1e-8), Real(0)});
    const Real lr = Real(0.25);
    opt.step(lr);
    // m_hat = v_hat = 1 after bias correction, so the update is -lr/(1+eps)
    CHECK(grad_close(p.value.data()[0], 1.0 - 0.25 / (1.0 + 1e-8), 1e-12));
}

TEST_CASE("decoupled weight decay shrinks by (1 - lr*wd) on zero gradient") {
    ParamStore store;
    Param& p = store.add("w", Tensor::scalar(2.0));
    AdamW opt(store, AdamWConfig{Real(0.9), Real(0.95), Real(1e-8), Real(0.1)});
    opt.step(Real(0.5));
    CHECK(p.value.data()[0] == Real(2.0) * (Real(1) - Real(0.5) * Real(0.1)));
}

TEST_CASE("a non-finite gradient aborts with the parameter name") {
    ParamStore store;
    Param& p = store.add("w_bad", Tensor::scalar(1.0));
    p.value.grad()[0] = std::numeric_limits<Real>::quiet_NaN();
    AdamW opt(store);
    try {
        opt.step(Real(0.1));
        FAIL("expected OptimError");
    } catch (const OptimError& e) {
        CHECK(std::string(e.what()).find("w_bad") != std::string::npos);
    }
}

TEST_CASE("frozen parameters are never touched by the optimizer") {
    ParamStore store;
    Rng rng(2);
    store.add("frozen", Tensor::randn({2, 2}, 1.0, rng), false);
    Param& live = store.add("live", Tensor::randn({2, 2}, 1.0, rng));
    for (auto& g : live.value.grad()) g = Real(1);
    AdamW opt(store);
    opt.step(Real(0.1));
    CHECK(opt.touched() == std::set<std::string>{"live"});
}

TEST_CASE("cosine warmup schedule hits its pinned points") {
    const std::int64_t warmup = 10, total = 110;
    const Real peak = Real(3e-4), floor = Real(3e-5);
    CHECK(cosine_warmup_lr(0, warmup, total, peak, floor) == Real(0));
    CHECK(cosine_warmup_lr(warmup, warmup, total, peak, floor) == peak);
    CHECK(cosine_warmup_lr(total, warmup, total, peak, floor) == floor);
    CHECK(cosine_warmup_lr(total + 5, warmup, total, peak, floor) == floor);
    const Real mid = cosine_warmup_lr((warmup + total) / 2, warmup, total, peak, floor);
    CHECK(grad_close(mid, (peak + floor) / 2, 1e-12));
    CHECK_THROWS_AS(cosine_warmup_lr(0, 10, 10, peak, floor), ConfigError);
}

TEST_CASE("neighborhood alpha selection follows the argmin and tie rules") {
    const auto eval_from = [](std::map<double, double> table) {
        return [table](double a) { return table.at(a); };
    };
    const double a = 1.0;
    CHECK(select_alpha_neighborhood(a, eval_from({{0.5, 0.9}, {1.0, 0.8}, {2.0, 1.1}})).alpha == 1.0);
    CHECK(select_alpha_neighborhood(a, eval_from({{0.5, 0.7}, {1.0, 0.7}, {2.0, 0.7}})).alpha == 1.0);
    CHECK(select_alpha_neighborhood(a, eval_from({{0.5, 0.9}, {1.0, 0.8}, {2.0, 0.7}})).alpha == 2.0);
    // tie between the outer candidates prefers the smaller one
    CHECK(select_alpha_neighborhood(a, eval_from({{0.5, 0.6}, {1.0, 0.8}, {2.0, 0.6}})).alpha == 0.5);
    CHECK_THROWS_AS(select_alpha_neighborhood(0.0, eval_from({})), ConfigError);
}

TEST_CASE("grid alpha selection narrows around 1.0") {
    // argmin away from 1.0: no narrowing
    const AlphaSelection plain = select_alpha_grid([](double a) { return std::abs(a - 0.5); });
    CHECK(plain.alpha == 0.5);
    CHECK(plain.evaluated.size() == 5);

    // argmin at 1.0, then sqrt(2) wins the narrowed set
    const AlphaSelection narrowed = select_alpha_grid([](double a) { return std::abs(a - std::sqrt(2.0)); });
    CHECK(narrowed.alpha == std::sqrt(2.0));
    CHECK(narrowed.evaluated.size() == 10);

    // constant loss keeps 1.0
    const AlphaSelection flat = select_alpha_grid([](double) { return 0.5; });
    CHECK(flat.alpha == 1.0);
}

TEST_CASE("grid and neighborhood always return the candidate argmin") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        std::map<double, double> values;
        const auto j = [&](double a) {
            auto it = values.find(a);
            if (it == values.end()) it = values.emplace(a, rng.uniform()).first;
            return it->second;
        };
        const AlphaSelection grid_sel = select_alpha_grid(j);
        double best = grid_sel.evaluated.front().j_val;
        bool member = false;
        for (const auto& c : grid_sel.evaluated) best = std::min(best, c.j_val);
        for (const auto& c : grid_sel.evaluated) member = member || c.alpha == grid_sel.alpha;
        CHECK(member);
        CHECK(j(grid_sel.alpha) == best);

        values.clear();
        const AlphaSelection nb = select_alpha_neighborhood(0.4 + rng.uniform(), j);
        double nb_best = nb.evaluated.front().j_val;
        for (const auto& c : nb.evaluated) nb_best = std::min(nb_best, c.j_val);
        CHECK(j(nb.alpha) == nb_best);
    }
}

TEST_CASE("quasi-convexity check accepts convex and monotone samples, flags bumps") {
    std::vector<AlphaCandidate> convex;
    for (double a : {0.25, 0.5, 1.0, 2.0, 3.0}) convex.push_back({a, (a - 1.0) * (a - 1.0)});
    CHECK(check_quasiconvex(convex).quasi_convex);

    const std::vector<AlphaCandidate> bump{{0.5, 1.0}, {1.0, 3.0}, {2.0, 1.0}};
    const QuasiConvexReport rep = check_quasiconvex(bump);
    CHECK_FALSE(rep.quasi_convex);
    CHECK(rep.mid == 1);

    std::vector<AlphaCandidate> monotone;
    for (double a : {0.25, 0.5, 1.0, 2.0}) monotone.push_back({a, -a});
    CHECK(check_quasiconvex(monotone).quasi_convex);

    CHECK_THROWS_AS(check_quasiconvex({{1.0, 0.0}, {2.0, 0.0}}), ConfigError);
}

TEST_CASE("balance search runs to the floor on flat losses") {
    const BalanceReport rep = balance_point_search([](double) { return 1.0; }, [](double) { return 2.0; }, 1.0,
                                                   0.5, 1e-2);
    CHECK_FALSE(rep.stopped_by_rule);
    CHECK(rep.alpha >= 1e-2);
    CHECK(rep.alpha * 0.5 < 1e-2);
    for (const auto& p : rep.probes) {
        CHECK(p.j_custom == 1.0);
        CHECK(p.j_general == 2.0);
    }
}

TEST_CASE("balance search stops immediately when the tradeoff is live at 1.0") {
    const BalanceReport rep = balance_point_search([](double a) { return -a; }, [](double a) { return a; });
    CHECK(rep.stopped_by_rule);
    CHECK(rep.alpha == 1.0);
}

TEST_CASE("balance search lands within one shrink factor of the analytic balance point") {
    // custom loss minimized at 0.25, general loss decreasing toward 0:
    // below 0.25 the tradeoff rule fires
    const auto j_custom = [](double a) { return (a - 0.25) * (a - 0.25); };
    const auto j_general = [](double a) { return a * a; };
    const BalanceReport rep = balance_point_search(j_custom, j_general, 1.0, 0.5, 1e-4);
    CHECK(rep.stopped_by_rule);
    CHECK(rep.alpha >= 0.25 * 0.999);
    CHECK(rep.alpha <= 0.25 / 0.5 * 1.001);
}

TEST_CASE("training with lr = 0 is a no-op") {
    const BaseModel base = memo_base();
    CarryOnModel carry = CarryOnModel::init(carry_cfg(base, 1, 32), 51);
    LocalTapSource source(base, "main", carry.needed_depths(), 0);
    const auto seqs = memo_sequences(24, 5);
    const std::vector<TokenSequence> train(seqs.begin(), seqs.begin() + 16);
    const std::vector<TokenSequence> val(seqs.begin() + 16, seqs.end());

    const std::vector<Real> before = carry.params.flatten_values();
    std::vector<TapSet> val_taps;
    for (const auto& s : val) val_taps.push_back(source.fetch(s.inputs()));
    std::vector<TokenSequence> val_copy = val;
    const double loss_before = detail::val_loss_over(carry, val_taps, val_copy, carry.alpha, 4, &base);

    TrainOptions opt;
    opt.epochs = 1;
    opt.batch_size = 4;
    opt.mask_before = 4;
    opt.lr_peak = Real(0);
    opt.alpha_mode = AlphaMode::fixed;
    opt.head_base = &base;
    const TrainResult result = train_carryon(carry, source, train, val, opt);
    CHECK(carry.params.flatten_values() == before);
    CHECK(grad_close(result.final_val_loss, loss_before, 1e-12));
}

TEST_CASE("memorization loss strictly decreases over the first five epochs") {
    const BaseModel base = memo_base();
    CarryOnModel carry = CarryOnModel::init(carry_cfg(base, 1, 64), 53);
    LocalTapSource source(base, "main", carry.needed_depths(), 4);
    const auto train = memo_sequences(192, 11);
    const auto val = memo_sequences(16, 12);

    TrainOptions opt;
    opt.epochs = 5;
    opt.batch_size = 16;
    opt.mask_before = 4;
    opt.lr_peak = Real(3e-3);
    opt.warmup_steps = 5;
    opt.alpha_mode = AlphaMode::fixed;
    opt.head_base = &base;
    opt.seed = 17;
    const TrainResult result = train_carryon(carry, source, train, val, opt);

    // mean train loss per epoch
    std::vector<double> epoch_mean;
    const std::int64_t per_epoch = result.steps / 5;
    double acc = 0;
    int count = 0;
    for (const auto& row : result.curves) {
        if (row.split != "train") continue;
        acc += row.loss;
        if (++count == per_epoch) {
            epoch_mean.push_back(acc / count);
            acc = 0;
            count = 0;
        }
    }
    REQUIRE(epoch_mean.size() == 5);
    for (std::size_t e = 1; e < epoch_mean.size(); ++e) CHECK(epoch_mean[e] < epoch_mean[e - 1]);
}

TEST_CASE("a larger carry-on reaches the loss threshold in fewer steps") {
    const BaseModel base = memo_base();
    const auto train = memo_sequences(256, 31);
    const auto val = memo_sequences(8, 32);
    const double threshold = 4.0;

    const auto steps_to_threshold = [&](int layers, int hidden) {
        CarryOnConfig cfg = carry_cfg(base, layers, hidden);
        cfg.alpha_init = 1.0; // weak derivative signal at small alpha
        CarryOnModel carry = CarryOnModel::init(cfg, 71);
        LocalTapSource source(base, "main", carry.needed_depths(), 4);
        TrainOptions opt;
        opt.epochs = 12;
        opt.batch_size = 16;
        opt.mask_before = 4;
        opt.lr_peak = Real(1e-2);
        opt.warmup_steps = 5;
        opt.alpha_mode = AlphaMode::fixed;
        opt.head_base = &base;
        opt.seed = 19;
        const TrainResult result = train_carryon(carry, source, train, val, opt);
        for (const auto& row : result.curves)
            if (row.split == "train" && row.loss < threshold) return row.step;
        return result.steps + 1;
    };

    const std::int64_t big = steps_to_threshold(2, 128);
    const std::int64_t small = steps_to_threshold(1, 16);
    CHECK(big < small);
}

TEST_CASE("training trajectories are bit-identical under a fixed seed") {
    const BaseModel base = memo_base();
    const auto train = memo_sequences(32, 41);
    const auto val = memo_sequences(8, 42);
    const auto run = [&] {
        CarryOnModel carry = CarryOnModel::init(carry_cfg(base, 1, 32), 99);
        LocalTapSource source(base, "main", carry.needed_depths(), 4);
        TrainOptions opt;
        opt.epochs = 2;
        opt.batch_size = 8;
        opt.mask_before = 4;
        opt.lr_peak = Real(1e-3);
        opt.alpha_mode = AlphaMode::grid;
        opt.head_base = &base;
        opt.seed = 7;
        train_carryon(carry, source, train, val, opt);
        return carry.params.flatten_values();
    };
    CHECK(run() == run());
}

TEST_CASE("optimizer touches exactly the carry-on and alignment parameters") {
    const BaseModel base = memo_base();
    CarryOnModel carry = CarryOnModel::init(carry_cfg(base, 1, 32), 59);
    LocalTapSource source(base, "main", carry.needed_depths(), 0);
    const auto train = memo_sequences(16, 61);
    const auto val = memo_sequences(4, 62);
    TrainOptions opt;
    opt.epochs = 1;
    opt.batch_size = 8;
    opt.mask_before = 4;
    opt.alpha_mode = AlphaMode::fixed;
    opt.head_base = &base;
    const TrainResult result = train_carryon(carry, source, train, val, opt);
    std::set<std::string> expected;
    for (std::size_t i = 0; i < carry.params.size(); ++i) expected.insert(carry.params[i].name);
    CHECK(result.params_touched == expected);
    bool has_align = false;
    for (const auto& name : result.params_touched) has_align = has_align || name.rfind("align.", 0) == 0;
    CHECK(has_align);
}

TEST_CASE("divergence aborts and restores the last good checkpoint") {
    testutil::TempDir tmp("diverge");
    const BaseModel base = memo_base();
    CarryOnModel carry = CarryOnModel::init(carry_cfg(base, 1, 32), 67);
    // poison one weight so the first forward pass yields a non-finite loss
    carry.params.at("main.w").value.data()[0] = std::numeric_limits<Real>::quiet_NaN();
    carry.alpha = 1.0;
    LocalTapSource source(base, "main", carry.needed_depths(), 0);
    const auto train = memo_sequences(8, 71);
    const auto val = memo_sequences(4, 72);
    TrainOptions opt;
    opt.epochs = 1;
    opt.batch_size = 4;
    opt.mask_before = 4;
    opt.alpha_mode = AlphaMode::fixed;
    opt.head_base = &base;
    opt.checkpoint_path = tmp.path("last_good.cgpt");
    CHECK_THROWS_AS(train_carryon(carry, source, train, val, opt), OptimError);
    // the checkpoint exists and holds the pre-step parameters
    const CarryOnModel restored = CarryOnModel::load(tmp.path("last_good.cgpt"));
    CHECK(restored.params.size() == carry.params.size());
}

TEST_CASE("epoch alpha history records candidates with the chosen argmin") {
    const BaseModel base = memo_base();
    CarryOnModel carry = CarryOnModel::init(carry_cfg(base, 1, 32), 73);
    LocalTapSource source(base, "main", carry.needed_depths(), 4);
    const auto train = memo_sequences(16, 81);
    const auto val = memo_sequences(6, 82);
    TrainOptions opt;
    opt.epochs = 2;
    opt.batch_size = 8;
    opt.mask_before = 4;
    opt.alpha_mode = AlphaMode::grid;
    opt.head_base = &base;
    const TrainResult result = train_carryon(carry, source, train, val, opt);
    REQUIRE(result.alpha_state.history.size() == 2);
    for (const auto& rec : result.alpha_state.history) {
        double best = rec.candidates.front().j_val;
        bool chosen_found = false;
        for (const auto& c : rec.candidates) best = std::min(best, c.j_val);
        for (const auto& c : rec.candidates)
            if (c.alpha == rec.chosen) {
                chosen_found = true;
                CHECK(c.j_val == best);
            }
        CHECK(chosen_found);
    }
    CHECK(carry.alpha == result.alpha_state.alpha);
}

TEST_CASE("joint training moves base parameters through graph-attached taps") {
    BaseModel base = memo_base(77);
    base.freeze();
    const std::vector<Real> frozen_before = base.params.flatten_values();
    CarryOnModel carry = CarryOnModel::init(carry_cfg(base, 1, 32), 81);
    const auto train = memo_sequences(16, 91);
    const auto val = memo_sequences(4, 92);

    TrainOptions opt;
    opt.epochs = 1;
    opt.batch_size = 8;
    opt.mask_before = 4;
    opt.lr_peak = Real(1e-3);
    opt.base_lr = Real(1e-4);
    opt.alpha_mode = AlphaMode::fixed;
    opt.head_base = &base;
    opt.train_base = &base;
    GraphTapSource source(base, "main", carry.needed_depths());
    const TrainResult result = train_carryon(carry, source, train, val, opt);

    CHECK(base.params.flatten_values() != frozen_before);
    bool touched_base = false;
    for (const auto& name : result.params_touched) touched_base = touched_base || name == "wte";
    CHECK(touched_base);

    // without the flag, the same graph source leaves the frozen base fixed
    BaseModel frozen = memo_base(77);
    frozen.freeze();
    const std::vector<Real> before = frozen.params.flatten_values();
    CarryOnModel carry2 = CarryOnModel::init(carry_cfg(frozen, 1, 32), 81);
    GraphTapSource source2(frozen, "main", carry2.needed_depths());
    TrainOptions opt2 = opt;
    opt2.train_base = nullptr;
    opt2.head_base = &frozen;
    train_carryon(carry2, source2, train, val, opt2);
    CHECK(frozen.params.flatten_values() == before);
}
