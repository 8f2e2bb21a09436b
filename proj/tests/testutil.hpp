#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "carrygpt/tensor.hpp"

namespace testutil {

using carrygpt::Real;
using carrygpt::Tensor;

// |a - b| <= atol + rtol * max(|a|, |b|); the atol floor absorbs
// finite-difference noise on near-zero gradients.
inline bool grad_close(double a, double b, double rtol, double atol = 1e-8) {
    return std::abs(a - b) <= atol + rtol * std::max(std::abs(a), std::abs(b));
}

// Central finite-difference gradient of f w.r.t. every element of x.
// f must rebuild its graph from the current contents of x on each call.
inline std::vector<double> numeric_grad(const std::function<double()>& f, Tensor& x, double h = 1e-5) {
    std::vector<double> g(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const Real keep = x.data()[i];
        x.data()[i] = keep + static_cast<Real>(h);
        const double up = f();
        x.data()[i] = keep - static_cast<Real>(h);
        const double down = f();
        x.data()[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// Runs loss() once with autodiff, then compares x's accumulated gradient
// against central differences. Returns the worst mismatch description, or
// empty string on success.
inline std::string check_gradient(const std::function<Tensor()>& loss, Tensor& x, double rtol,
                                  double h = 1e-5, double atol = 1e-8) {
    x.zero_grad();
    const Tensor out = loss();
    out.backward();
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    const std::vector<double> numeric = numeric_grad([&] { return static_cast<double>(loss().data()[0]); }, x, h);
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        if (!grad_close(analytic[i], numeric[i], rtol, atol)) {
            char buf[160];
            std::snprintf(buf, sizeof(buf), "grad mismatch at %zu: autodiff=%.10g fd=%.10g", i, analytic[i],
                          numeric[i]);
            return buf;
        }
    }
    return {};
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        base_ = std::filesystem::temp_directory_path() /
                ("carrygpt_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        std::filesystem::create_directories(base_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(base_, ec);
    }
    std::string path(const std::string& name) const { return (base_ / name).string(); }
    std::string dir() const { return base_.string(); }

private:
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::filesystem::path base_;
};

} // namespace testutil
