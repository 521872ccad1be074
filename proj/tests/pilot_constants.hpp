#pragma once

// Constants frozen from cf_pilot measurement runs (tools/pilot.cpp).
// Regenerate with `cf_pilot timing`, `cf_pilot recovery`, `cf_pilot
// ablation` and transcribe the printed numbers here. The acceptance
// binary reads only this header, never the pilot output, so the committed
// values are the contract.

#include <cstdint>

namespace pilot {

// Recovery run: default model and dataset, full schedule.
inline constexpr long long kRecoverySteps = 600;
inline constexpr long long kRecoveryBatch = 32;
inline constexpr double kRecoveryLr = 3e-4;
inline constexpr long long kRecoveryEvalSamples = 100;
inline constexpr long long kRecoveryPermutations = 400;
inline constexpr long long kRecoveryDdpmSteps = 25;
inline constexpr std::uint64_t kRecoverySeed = 7;

// Ablation cells: smaller model so the grid stays inside the time budget.
inline constexpr long long kCellDim = 48;
inline constexpr long long kCellLayers = 2;
inline constexpr long long kCellSteps = 500;
inline constexpr long long kCellBatch = 32;
inline constexpr double kCellLr = 1e-3;
inline constexpr long long kCellEvalSamples = 100;
inline constexpr long long kCellPermutations = 200;
inline constexpr std::uint64_t kCellSeed = 7;

// Directional thresholds. MMD ratios clamp each statistic at its
// permutation null's q99 before dividing, so a statistically-zero value
// cannot inflate a ratio. Pilot measurements left comfortable margin to
// these gates.
inline constexpr double kFixed1CollapseMin = 3.0;  // u(s_eval=8) / u(s_eval=1), fixed-1 cell
inline constexpr double kRandomFlatMax = 2.0;      // max/min u over s_eval grid, random-S cell
inline constexpr double kProbeDecayMin = 1.0;      // first-quartile / last-quartile val loss
}  // namespace pilot
