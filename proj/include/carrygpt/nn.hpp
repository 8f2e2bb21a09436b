#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "carrygpt/tensor.hpp"

namespace carrygpt {

// A named, possibly trainable tensor. Frozen params never accumulate
// gradients (their node does not require grad), so a forward pass through
// them records no graph.
struct Param {
    std::string name;
    Tensor value;
    bool trainable = true;

    Param() = default;
    Param(std::string n, Tensor v, bool t = true) : name(std::move(n)), value(std::move(v)), trainable(t) {
        value.set_requires_grad(t);
    }

    void set_trainable(bool t) {
        trainable = t;
        value.set_requires_grad(t);
    }
};

// Ordered parameter collection. Iteration order is creation order, which
// fixes the optimizer update order and the serialized layout.
class ParamStore {
public:
    Param& add(const std::string& name, Tensor value, bool trainable = true) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        index_[name] = params_.size();
        params_.push_back(std::make_unique<Param>(name, std::move(value), trainable));
        return *params_.back();
    }

    Param& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return *params_[it->second];
    }

    const Param& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return *params_[it->second];
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t size() const { return params_.size(); }
    Param& operator[](std::size_t i) { return *params_[i]; }
    const Param& operator[](std::size_t i) const { return *params_[i]; }

    void freeze_all() {
        for (auto& p : params_) p->set_trainable(false);
    }

    void zero_grad() {
        for (auto& p : params_) p->value.zero_grad();
    }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->value.numel();
        return n;
    }

    // Flat copy of all values in store order, for bit-exact trajectory checks.
    std::vector<Real> flatten_values() const {
        std::vector<Real> out;
        out.reserve(total_elements());
        for (const auto& p : params_)
            out.insert(out.end(), p->value.data().begin(), p->value.data().end());
        return out;
    }

private:
    std::vector<std::unique_ptr<Param>> params_;
    std::map<std::string, std::size_t> index_;
};

// Pre-norm transformer block: x += attn(norm(x)); x += ffn(norm(x)).
// The FFN half is pluggable (dense in the base model, dense or MoE in the
// carry-on trunk), so this struct only owns the attention half.
struct AttentionBlock {
    Param* norm_gain = nullptr;
    Param* wq = nullptr;
    Param* wk = nullptr;
    Param* wv = nullptr;
    Param* wo = nullptr;
    int heads = 1;
    Real eps = Real(1e-6);

    static AttentionBlock create(ParamStore& store, const std::string& prefix, int dim, int heads, Real init_std,
                                 Rng& rng) {
        AttentionBlock b;
        b.heads = heads;
        b.norm_gain = &store.add(prefix + ".attn_norm.gain", Tensor::full({1, dim}, Real(1)));
        b.wq = &store.add(prefix + ".attn.wq", Tensor::randn({dim, dim}, init_std, rng));
        b.wk = &store.add(prefix + ".attn.wk", Tensor::randn({dim, dim}, init_std, rng));
        b.wv = &store.add(prefix + ".attn.wv", Tensor::randn({dim, dim}, init_std, rng));
        b.wo = &store.add(prefix + ".attn.wo", Tensor::randn({dim, dim}, init_std, rng));
        return b;
    }

    static AttentionBlock attach(ParamStore& store, const std::string& prefix, int heads, Real eps = Real(1e-6)) {
        AttentionBlock b;
        b.heads = heads;
        b.eps = eps;
        b.norm_gain = &store.at(prefix + ".attn_norm.gain");
        b.wq = &store.at(prefix + ".attn.wq");
        b.wk = &store.at(prefix + ".attn.wk");
        b.wv = &store.at(prefix + ".attn.wv");
        b.wo = &store.at(prefix + ".attn.wo");
        return b;
    }

    Tensor forward(const Tensor& x) const {
        const Tensor normed = rms_norm(x, norm_gain->value, eps);
        return add(x, attention(normed, wq->value, wk->value, wv->value, wo->value, heads, /*causal=*/true));
    }
};

// Dense FFN half: x += w2(silu(w1(norm(x)))).
struct DenseFfn {
    Param* norm_gain = nullptr;
    Param* w1 = nullptr;
    Param* w2 = nullptr;
    Real eps = Real(1e-6);

    static DenseFfn create(ParamStore& store, const std::string& prefix, int dim, int hidden, Real init_std,
                           Rng& rng) {
        DenseFfn f;
        f.norm_gain = &store.add(prefix + ".ffn_norm.gain", Tensor::full({1, dim}, Real(1)));
        f.w1 = &store.add(prefix + ".ffn.w1", Tensor::randn({dim, hidden}, init_std, rng));
        f.w2 = &store.add(prefix + ".ffn.w2", Tensor::randn({hidden, dim}, init_std, rng));
        return f;
    }

    static DenseFfn attach(ParamStore& store, const std::string& prefix, Real eps = Real(1e-6)) {
        DenseFfn f;
        f.eps = eps;
        f.norm_gain = &store.at(prefix + ".ffn_norm.gain");
        f.w1 = &store.at(prefix + ".ffn.w1");
        f.w2 = &store.at(prefix + ".ffn.w2");
        return f;
    }

    Tensor forward(const Tensor& x) const {
        const Tensor normed = rms_norm(x, norm_gain->value, eps);
        return add(x, matmul(silu(matmul(normed, w1->value)), w2->value));
    }
};

} // namespace carrygpt
