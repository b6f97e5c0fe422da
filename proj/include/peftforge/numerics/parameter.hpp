#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "peftforge/errors.hpp"

namespace peftforge {

// Dense storage for everything in the library. Row-major so that serialized
// tensors are portable and raw-byte checksums are layout independent.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

/// A named tensor with a gradient slot. Gradients are accumulated by
/// Graph::backward(); the value is only ever changed by an optimizer,
/// and only when `trainable` is set.
template <typename Scalar>
struct Parameter {
    std::string path;
    Matrix<Scalar> value;
    Matrix<Scalar> grad;
    bool trainable = true;
    bool grad_live = false; // any gradient accumulated since the last zero_grad()

    Parameter() = default;

    Parameter(std::string path_, Matrix<Scalar> value_, bool trainable_ = true)
        : path(std::move(path_)),
          value(std::move(value_)),
          grad(Matrix<Scalar>::Zero(value.rows(), value.cols())),
          trainable(trainable_) {}

    Eigen::Index size() const { return value.size(); }

    void zero_grad() {
        grad.setZero();
        grad_live = false;
    }

    void accumulate(const Matrix<Scalar>& g) {
        if (g.rows() != value.rows() || g.cols() != value.cols())
            throw DimensionError("gradient shape " + shape_str(g) +
                                 " does not match parameter " + path + " " + shape_str(value));
        grad += g;
        grad_live = true;
    }

    static std::string shape_str(const Matrix<Scalar>& m) {
        return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
    }
};

/// Registry of every Parameter belonging to one model. Paths are unique;
/// iteration order is registration order and is what makes checksums,
/// checkpoints and optimizer updates reproducible.
template <typename Scalar>
class ParameterStore {
public:
    void add(Parameter<Scalar>& p) {
        if (index_.count(p.path))
            throw StateError("duplicate parameter path: " + p.path);
        index_.emplace(p.path, params_.size());
        params_.push_back(&p);
    }

    Parameter<Scalar>* find(const std::string& path) const {
        auto it = index_.find(path);
        return it == index_.end() ? nullptr : params_[it->second];
    }

    const std::vector<Parameter<Scalar>*>& all() const { return params_; }

    std::int64_t total_size() const {
        std::int64_t n = 0;
        for (const auto* p : params_) n += p->size();
        return n;
    }

    std::int64_t trainable_size() const {
        std::int64_t n = 0;
        for (const auto* p : params_)
            if (p->trainable) n += p->size();
        return n;
    }

    void zero_grads() {
        for (auto* p : params_) p->zero_grad();
    }

    void set_trainable_all(bool t) {
        for (auto* p : params_) p->trainable = t;
    }

    bool any_grad_live() const {
        for (const auto* p : params_)
            if (p->grad_live) return true;
        return false;
    }

    /// FNV-1a over the raw bytes of every frozen parameter, in registration
    /// order. Bit-identity of frozen weights across a training run is part of
    /// the freezing contract.
    std::uint64_t frozen_checksum() const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const unsigned char* bytes, std::size_t n) {
            for (std::size_t i = 0; i < n; ++i) {
                h ^= bytes[i];
                h *= 1099511628211ull;
            }
        };
        for (const auto* p : params_) {
            if (p->trainable) continue;
            mix(reinterpret_cast<const unsigned char*>(p->value.data()),
                sizeof(Scalar) * static_cast<std::size_t>(p->value.size()));
        }
        return h;
    }

private:
    std::vector<Parameter<Scalar>*> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

} // namespace peftforge
