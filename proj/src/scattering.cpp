#include "dhformer/scattering.hpp"

#include <cmath>
#include <string>

namespace dhformer {

void HazeParams::validate() const {
    if (!(airlight > 0.0 && airlight <= 1.0))
        throw DomainError("airlight must be in (0, 1], got " + std::to_string(airlight));
    if (!(beta > 0.0))
        throw DomainError("beta must be > 0, got " + std::to_string(beta));
}

Tensor transmission_from_depth(const Tensor& depth, double beta, double floor) {
    if (!(beta > 0.0)) throw DomainError("beta must be > 0");
    if (!(floor > 0.0 && floor < 1.0)) throw DomainError("transmission floor must be in (0, 1)");
    for (double d : depth.values())
        if (d < 0.0) throw DomainError("negative depth value " + std::to_string(d));
    Tensor t = exp(mul_scalar(depth, -beta));
    return clamp(t, floor, 1.0);
}

Tensor synthesize_haze(const Tensor& clear, const Tensor& t, double airlight) {
    HazeParams{airlight, 1.0}.validate();
    for (double v : clear.values())
        if (v < 0.0 || v > 1.0)
            throw DomainError("clear image sample outside [0,1]: " + std::to_string(v));
    for (double v : t.values())
        if (v <= 0.0 || v > 1.0)
            throw DomainError("transmission outside (0,1]: " + std::to_string(v));
    // J*t + A*(1-t)
    Tensor one_minus_t = add_scalar(mul_scalar(t, -1.0), 1.0);
    return add(mul(clear, t), mul_scalar(one_minus_t, airlight));
}

Tensor ratio_image(const Tensor& hazy, const Tensor& t, double floor) {
    for (double v : t.values())
        if (v < floor)
            throw DomainError("transmission " + std::to_string(v) + " below floor " +
                              std::to_string(floor));
    return div(hazy, t);
}

Tensor residual_target(const Tensor& hazy, const Tensor& clear, const Tensor& t,
                       double floor) {
    return sub(ratio_image(hazy, t, floor), clear);
}

Tensor recompose_unclamped(const Tensor& ratio, const Tensor& residual) {
    if (ratio.shape() != residual.shape())
        throw DimensionError("recompose shape mismatch: " + shape_str(ratio.shape()) + " vs " +
                             shape_str(residual.shape()));
    return sub(ratio, residual);
}

Tensor recompose(const Tensor& ratio, const Tensor& residual) {
    return clamp(recompose_unclamped(ratio, residual), 0.0, 1.0);
}

}  // namespace dhformer
