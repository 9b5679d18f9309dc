#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "metairnet/ops.hpp"
#include "metairnet/random.hpp"

namespace metairnet {

enum class ParamKind { weight, bias, bn_scale, bn_shift, embedding };

inline bool is_batch_norm(ParamKind k) { return k == ParamKind::bn_scale || k == ParamKind::bn_shift; }

template <typename S>
struct NamedParam {
    std::string name;
    Var<S> var;
    ParamKind kind;
};

template <typename S>
using ParamList = std::vector<NamedParam<S>>;

template <typename S>
struct NamedBuffer {
    std::string name;
    Tensor<S>* tensor;
};

template <typename S>
using BufferList = std::vector<NamedBuffer<S>>;

template <typename S>
Index count_scalars(const ParamList<S>& params) {
    Index n = 0;
    for (const auto& p : params) n += p.var.size();
    return n;
}

template <typename S>
void set_requires_grad(const ParamList<S>& params, bool on) {
    for (const auto& p : params) {
        Var<S> v = p.var;
        v.set_requires_grad(on);
    }
}

template <typename S>
struct Linear {
    Parameter<S> weight;
    Parameter<S> bias;

    Linear() = default;
    Linear(Index in, Index out, Rng& rng)
        : weight(rand_uniform<S>({out, in}, rng, -1.0 / std::sqrt(double(in)), 1.0 / std::sqrt(double(in)))),
          bias(Tensor<S>({out})) {}

    Index in_features() const { return weight.value().dim(1); }
    Index out_features() const { return weight.value().dim(0); }

    Var<S> operator()(const Var<S>& x) const { return linear(x, weight.var(), bias.var()); }

    void parameters(ParamList<S>& out, const std::string& prefix) const {
        out.push_back({prefix + "weight", weight.var(), ParamKind::weight});
        out.push_back({prefix + "bias", bias.var(), ParamKind::bias});
    }
};

/// 'same' padded stride-1 convolution.
template <typename S>
struct Conv2d {
    Parameter<S> weight;
    Parameter<S> bias;

    Conv2d() = default;
    Conv2d(Index in, Index out, Index kernel, Rng& rng)
        : weight(randn<S>({out, in, kernel, kernel}, rng, std::sqrt(2.0 / double(in * kernel * kernel)))),
          bias(Tensor<S>({out})) {}

    Var<S> operator()(const Var<S>& x) const {
        return conv2d(x, weight.var(), bias.var(), weight.value().dim(2) / 2);
    }

    void parameters(ParamList<S>& out, const std::string& prefix) const {
        out.push_back({prefix + "weight", weight.var(), ParamKind::weight});
        out.push_back({prefix + "bias", bias.var(), ParamKind::bias});
    }
};

template <typename S>
struct BatchNorm {
    Parameter<S> gamma;
    Parameter<S> beta;
    BatchNormStats<S> stats;

    BatchNorm() = default;
    explicit BatchNorm(Index channels)
        : gamma(Tensor<S>::constant({channels}, S(1))),
          beta(Tensor<S>({channels})),
          stats{Tensor<S>({channels}), Tensor<S>::constant({channels}, S(1))} {}

    Index channels() const { return gamma.value().size(); }

    /// Batch statistics; updates the running statistics.
    Var<S> train(const Var<S>& x) { return batch_norm_train(x, gamma.var(), beta.var(), stats); }
    /// Running statistics.
    Var<S> infer(const Var<S>& x) const { return batch_norm_infer(x, gamma.var(), beta.var(), stats); }

    Var<S> operator()(const Var<S>& x, bool training) { return training ? train(x) : infer(x); }

    void parameters(ParamList<S>& out, const std::string& prefix) const {
        out.push_back({prefix + "gamma", gamma.var(), ParamKind::bn_scale});
        out.push_back({prefix + "beta", beta.var(), ParamKind::bn_shift});
    }

    void buffers(BufferList<S>& out, const std::string& prefix) {
        out.push_back({prefix + "running_mean", &stats.mean});
        out.push_back({prefix + "running_var", &stats.var});
    }
};

/// Adam with per-parameter learning rates.
template <typename S>
class Adam {
public:
    struct Slot {
        Var<S> param;
        double lr;
        Tensor<S> m;
        Tensor<S> v;
    };

    explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void add(const Var<S>& param, double lr) {
        slots_.push_back({param, lr, Tensor<S>(param.shape()), Tensor<S>(param.shape())});
    }

    void add(const ParamList<S>& params, double lr) {
        for (const auto& p : params) add(p.var, lr);
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, double(t_));
        const double c2 = 1.0 - std::pow(beta2_, double(t_));
        for (auto& s : slots_) {
            if (!s.param.has_grad()) continue;
            const auto& g = s.param.grad().data;
            s.m.data = S(beta1_) * s.m.data + S(1 - beta1_) * g;
            s.v.data = S(beta2_) * s.v.data + S(1 - beta2_) * g.square();
            const S step = static_cast<S>(s.lr / c1);
            Var<S> p = s.param;
            p.mutable_value().data -= step * s.m.data / ((s.v.data / S(c2)).sqrt() + S(eps_));
        }
    }

    void zero_grad() {
        for (auto& s : slots_) {
            Var<S> p = s.param;
            p.zero_grad();
        }
    }

    long steps() const { return t_; }
    void set_steps(long t) { t_ = t; }
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }

private:
    double beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Slot> slots_;
};

}  // namespace metairnet
