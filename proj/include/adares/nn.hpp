#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "adares/autodiff.hpp"

namespace adares::nn {

using ParamList = std::vector<Parameter*>;
/// Named tensors making up a module's persistent state (parameter values and buffers).
using StateList = std::vector<std::pair<std::string, Tensor*>>;

enum class Mode { Train, Eval };

inline constexpr double kLeakySlope = 0.01;

inline Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : t.data()) v = dist(rng);
    return t;
}

inline std::size_t count_parameters(const ParamList& params) {
    std::size_t n = 0;
    for (const Parameter* p : params) n += p->value.size();
    return n;
}

class Conv1d {
public:
    Conv1d() = default;
    Conv1d(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, std::mt19937_64& rng)
        : in_channels_(in), out_channels_(out), kernel_(kernel) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel));
        weight = Parameter(name + ".weight", uniform_tensor({out, in, kernel}, bound, rng));
        bias = Parameter(name + ".bias", uniform_tensor({out}, bound, rng));
    }

    Var forward(Tape& tape, const Var& x) { return ad::conv1d_same(x, tape.param(weight), tape.param(bias)); }

    void collect(ParamList& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
    void collect_state(StateList& out) {
        out.emplace_back(weight.name, &weight.value);
        out.emplace_back(bias.name, &bias.value);
    }

    std::size_t in_channels() const { return in_channels_; }
    std::size_t out_channels() const { return out_channels_; }

    Parameter weight;
    Parameter bias;

private:
    std::size_t in_channels_ = 0, out_channels_ = 0, kernel_ = 0;
};

/// Per-channel batch normalisation over [B, C, T] with learnable scale and shift.
class BatchNorm1d {
public:
    BatchNorm1d() = default;
    BatchNorm1d(const std::string& name, std::size_t channels, double momentum = 0.1, double eps = 1e-5)
        : gamma(name + ".gamma", Tensor({channels}, 1.0)),
          beta(name + ".beta", Tensor({channels}, 0.0)),
          running_mean({channels}, 0.0),
          running_var({channels}, 1.0),
          name_(name),
          momentum_(momentum),
          eps_(eps) {}

    Var forward(Tape& tape, const Var& x, Mode mode) {
        Var g = tape.param(gamma);
        Var b = tape.param(beta);
        if (mode == Mode::Eval) return ad::batchnorm_eval(x, g, b, running_mean, running_var, eps_);
        ad::BatchStats stats;
        Var y = ad::batchnorm_train(x, g, b, eps_, &stats);
        const double n = static_cast<double>(stats.count);
        const double unbias = n > 1 ? n / (n - 1.0) : 1.0;
        for (std::size_t c = 0; c < stats.mean.size(); ++c) {
            running_mean[c] = (1.0 - momentum_) * running_mean[c] + momentum_ * stats.mean[c];
            running_var[c] = (1.0 - momentum_) * running_var[c] + momentum_ * stats.var[c] * unbias;
        }
        return y;
    }

    void collect(ParamList& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
    void collect_state(StateList& out) {
        out.emplace_back(gamma.name, &gamma.value);
        out.emplace_back(beta.name, &beta.value);
        out.emplace_back(name_ + ".running_mean", &running_mean);
        out.emplace_back(name_ + ".running_var", &running_var);
    }

    Parameter gamma;
    Parameter beta;
    Tensor running_mean;
    Tensor running_var;

private:
    std::string name_;
    double momentum_ = 0.1;
    double eps_ = 1e-5;
};

/// x [B, in] -> [B, out].
class Linear {
public:
    Linear() = default;
    Linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        weight = Parameter(name + ".weight", uniform_tensor({out, in}, bound, rng));
        bias = Parameter(name + ".bias", uniform_tensor({out}, bound, rng));
    }

    Var forward(Tape& tape, const Var& x) {
        return ad::matmul(x, ad::transpose(tape.param(weight))) + tape.param(bias);
    }

    void collect(ParamList& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
    void collect_state(StateList& out) {
        out.emplace_back(weight.name, &weight.value);
        out.emplace_back(bias.name, &bias.value);
    }

    Parameter weight;
    Parameter bias;
};

/// Two zero-padded convolutions with batch norm and leaky ReLU; the skip path wraps the
/// second convolution only, so it carries no parameters even when in != out.
///
///   h = act(bn1(conv1(x)))
///   y = bn2(conv2(h)) + h        (then act(y) unless output_activation is off)
class ResConv1DBlock {
public:
    ResConv1DBlock() = default;
    ResConv1DBlock(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, std::mt19937_64& rng,
                   bool output_activation = true)
        : conv1(name + ".conv1", in, out, kernel, rng),
          bn1(name + ".bn1", out),
          conv2(name + ".conv2", out, out, kernel, rng),
          bn2(name + ".bn2", out),
          output_activation_(output_activation) {}

    Var forward(Tape& tape, const Var& x, Mode mode) {
        Var h = ad::leaky_relu(bn1.forward(tape, conv1.forward(tape, x), mode), kLeakySlope);
        Var y = bn2.forward(tape, conv2.forward(tape, h), mode) + h;
        return output_activation_ ? ad::leaky_relu(y, kLeakySlope) : y;
    }

    void collect(ParamList& out) {
        conv1.collect(out);
        bn1.collect(out);
        conv2.collect(out);
        bn2.collect(out);
    }
    void collect_state(StateList& out) {
        conv1.collect_state(out);
        bn1.collect_state(out);
        conv2.collect_state(out);
        bn2.collect_state(out);
    }

    /// 5*in*out + out + 2*out + 5*out^2 + out + 2*out for kernel 5.
    static std::size_t parameter_count(std::size_t in, std::size_t out, std::size_t kernel) {
        return kernel * in * out + out + 2 * out + kernel * out * out + out + 2 * out;
    }

    Conv1d conv1;
    BatchNorm1d bn1;
    Conv1d conv2;
    BatchNorm1d bn2;

private:
    bool output_activation_ = true;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(ParamList params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
        for (const Parameter* p : params_) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    void zero_grad() {
        for (Parameter* p : params_) p->zero_grad();
    }

    void step() {
        ++steps_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Parameter& p = *params_[k];
            if (!p.grad.all_finite()) throw NumericError("non-finite gradient for " + p.name);
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad[i];
                m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g;
                v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g * g;
                p.value[i] -= cfg_.lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + cfg_.eps);
            }
        }
    }

    std::size_t steps() const { return steps_; }

private:
    ParamList params_;
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::size_t steps_ = 0;
};

}  // namespace adares::nn
