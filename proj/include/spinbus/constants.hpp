#pragma once

#include <numbers>

// CODATA 2018 values, SI units.
namespace spinbus::constants {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

inline constexpr double kMu0Over4Pi = 1.00000000055e-7;     // T m A^-1
inline constexpr double kHbar = 1.054571817e-34;            // J s
inline constexpr double kGammaElectron = 1.76085963023e11;  // rad s^-1 T^-1
inline constexpr double kGamma13C = 6.728284e7;             // rad s^-1 T^-1

inline constexpr double kNanometre = 1e-9;

// Below this NV-nucleus distance the point-dipole hyperfine model is rejected.
inline constexpr double kContactRadiusNm = 0.3;

// Angular frequency from a value quoted in Hz / kHz.
constexpr double hz(double f) { return kTwoPi * f; }
constexpr double khz(double f) { return kTwoPi * 1e3 * f; }

}  // namespace spinbus::constants
