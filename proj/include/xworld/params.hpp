#pragma once

#include <map>
#include <string>

#include "xworld/autograd.hpp"
#include "xworld/rng.hpp"

namespace xworld {

// Named parameter set shared by all trainable modules. Initialization draws
// from the registry's own RNG so a (config, seed) pair fixes every weight.
template <typename T>
class ParamRegistry {
public:
    explicit ParamRegistry(uint64_t seed = 0) : rng_(seed) {}

    ag::Var<T> add(const std::string& name, Tensor<T> init) {
        auto v = ag::param(std::move(init));
        names_.push_back(name);
        params_.push_back(v);
        return v;
    }

    ag::Var<T> add_normal(const std::string& name, std::vector<int64_t> shape, double stddev) {
        Tensor<T> t(shape);
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng_.normal() * stddev);
        return add(name, std::move(t));
    }

    ag::Var<T> add_zeros(const std::string& name, std::vector<int64_t> shape) {
        return add(name, Tensor<T>(shape));
    }

    // Fan-in scaled init for linear weights [din, dout].
    ag::Var<T> add_linear_weight(const std::string& name, int64_t din, int64_t dout) {
        return add_normal(name, {din, dout}, 1.0 / std::sqrt(double(din)));
    }

    size_t size() const { return params_.size(); }
    const std::string& name(size_t i) const { return names_[i]; }
    ag::Var<T>& at(size_t i) { return params_[i]; }
    const std::vector<ag::Var<T>>& all() const { return params_; }

    void zero_grads() {
        for (auto& p : params_) {
            if (p->grad.shape == p->val.shape) p->grad.zero();
        }
    }

    std::map<std::string, Tensor<float>> state_dict() const {
        std::map<std::string, Tensor<float>> out;
        for (size_t i = 0; i < params_.size(); ++i)
            out[names_[i]] = params_[i]->val.template cast<float>();
        return out;
    }

    void load_state(const std::map<std::string, Tensor<float>>& sd) {
        for (size_t i = 0; i < params_.size(); ++i) {
            auto it = sd.find(names_[i]);
            if (it == sd.end())
                throw std::runtime_error("checkpoint missing tensor: " + names_[i]);
            if (it->second.shape != params_[i]->val.shape)
                throw std::runtime_error("checkpoint shape mismatch: " + names_[i]);
            params_[i]->val = it->second.template cast<T>();
        }
    }

    Rng& rng() { return rng_; }

private:
    Rng rng_;
    std::vector<std::string> names_;
    std::vector<ag::Var<T>> params_;
};

// Decoupled weight decay Adam with global-norm gradient clipping.
template <typename T>
class AdamW {
public:
    struct Config {
        double lr = 1e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
        double clip_norm = 1.0;
    };

    AdamW(ParamRegistry<T>& reg, Config cfg) : reg_(reg), cfg_(cfg) {
        m_.resize(reg.size());
        v_.resize(reg.size());
        for (size_t i = 0; i < reg.size(); ++i) {
            m_[i] = Tensor<T>(reg.at(i)->val.shape);
            v_[i] = Tensor<T>(reg.at(i)->val.shape);
        }
    }

    void step(double lr_scale = 1.0) {
        ++t_;
        double gn2 = 0;
        for (size_t i = 0; i < reg_.size(); ++i) {
            auto& p = reg_.at(i);
            if (p->grad.shape != p->val.shape) continue;
            for (int64_t j = 0; j < p->grad.numel(); ++j)
                gn2 += double(p->grad[j]) * double(p->grad[j]);
        }
        double clip = 1.0;
        double gn = std::sqrt(gn2);
        if (cfg_.clip_norm > 0 && gn > cfg_.clip_norm) clip = cfg_.clip_norm / gn;
        double lr = cfg_.lr * lr_scale;
        double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (size_t i = 0; i < reg_.size(); ++i) {
            auto& p = reg_.at(i);
            if (p->grad.shape != p->val.shape) continue;
            for (int64_t j = 0; j < p->val.numel(); ++j) {
                double g = double(p->grad[j]) * clip;
                double m = cfg_.beta1 * double(m_[i][j]) + (1 - cfg_.beta1) * g;
                double v = cfg_.beta2 * double(v_[i][j]) + (1 - cfg_.beta2) * g * g;
                m_[i][j] = static_cast<T>(m);
                v_[i][j] = static_cast<T>(v);
                double upd = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
                double val = double(p->val[j]);
                val -= lr * (upd + cfg_.weight_decay * val);
                p->val[j] = static_cast<T>(val);
            }
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    ParamRegistry<T>& reg_;
    Config cfg_;
    std::vector<Tensor<T>> m_, v_;
    int64_t t_ = 0;
};

}  // namespace xworld
