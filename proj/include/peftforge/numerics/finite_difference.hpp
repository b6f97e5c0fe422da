#pragma once

#include "peftforge/errors.hpp"
#include "peftforge/numerics/parameter.hpp"

namespace peftforge {

/// Central-difference gradient of a scalar-valued function of a matrix:
/// (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate. The test oracle every
/// analytic gradient in the library is checked against.
template <typename Scalar, typename F>
Matrix<Scalar> finite_difference_grad(F&& f, const Matrix<Scalar>& x, Scalar step) {
    if (!(step > Scalar(0))) throw ContractError("finite_difference_grad: step must be > 0");
    Matrix<Scalar> g(x.rows(), x.cols());
    Matrix<Scalar> xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const Scalar orig = xp.data()[i];
        xp.data()[i] = orig + step;
        const Scalar fp = f(static_cast<const Matrix<Scalar>&>(xp));
        xp.data()[i] = orig - step;
        const Scalar fm = f(static_cast<const Matrix<Scalar>&>(xp));
        xp.data()[i] = orig;
        g.data()[i] = (fp - fm) / (Scalar(2) * step);
    }
    return g;
}

/// Relative error with an absolute-difference fallback for tiny values,
/// suitable for comparing analytic gradients against the central-difference
/// oracle at 64-bit precision.
template <typename Scalar>
Scalar grad_rel_error(Scalar analytic, Scalar numeric) {
    const Scalar diff = std::abs(analytic - numeric);
    const Scalar scale = std::max(std::abs(analytic), std::abs(numeric));
    if (scale < Scalar(1e-7)) return diff < Scalar(1e-9) ? Scalar(0) : diff;
    return diff / scale;
}

template <typename Scalar>
Scalar max_grad_rel_error(const Matrix<Scalar>& analytic, const Matrix<Scalar>& numeric) {
    Scalar worst = 0;
    for (Eigen::Index i = 0; i < analytic.size(); ++i)
        worst = std::max(worst, grad_rel_error(analytic.data()[i], numeric.data()[i]));
    return worst;
}

} // namespace peftforge
