#pragma once
#include "dhformer/tensor.hpp"

namespace dhformer {

// Haze formation on [0,1] images: hazy = clear * t + A * (1 - t), with
// per-pixel transmission t = exp(-beta * depth). All functions are built
// from tensor ops, so they stay differentiable when inputs carry gradients.

// Transmission is floored away from zero so the ratio image I/t stays finite.
inline constexpr double kTransmissionFloor = 0.05;

struct HazeParams {
    double airlight;  // A, global atmospheric light, in (0, 1]
    double beta;      // scattering coefficient, > 0

    void validate() const;
};

// depth >= 0 elementwise, any layout image tensor. Output in [floor, 1].
Tensor transmission_from_depth(const Tensor& depth, double beta,
                               double floor = kTransmissionFloor);

// clear in [0,1], t in (0,1]; t broadcasts over the channel dim. The result
// is a pixelwise convex combination, so it lands in [0,1] without clamping.
Tensor synthesize_haze(const Tensor& clear, const Tensor& t, double airlight);

// K = hazy / t. Throws DomainError if any t < floor.
Tensor ratio_image(const Tensor& hazy, const Tensor& t,
                   double floor = kTransmissionFloor);

// u = K - clear = A (1 - t) / t, per channel. Shape of `clear`.
Tensor residual_target(const Tensor& hazy, const Tensor& clear, const Tensor& t,
                       double floor = kTransmissionFloor);

// Dehazed estimate from the ratio image and a predicted residual.
Tensor recompose_unclamped(const Tensor& ratio, const Tensor& residual);
Tensor recompose(const Tensor& ratio, const Tensor& residual);  // clamped to [0,1]

}  // namespace dhformer
