#pragma once

#include <cstddef>

// Every numeric default the toolkit uses, in one place. The README carries
// the same table with a note on where each value comes from.
namespace crossfi::defaults {

// optimizer
inline constexpr double kLearningRate = 5e-5;
inline constexpr double kDecay = 0.01;
inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// schedule
inline constexpr std::size_t kEpochs = 30;
inline constexpr std::size_t kBatchSize = 32;
inline constexpr double kFinetuneFraction = 0.2;

// similarity head
inline constexpr std::size_t kHeads = 4;
inline constexpr std::size_t kD2 = 64;

// encoder
inline constexpr std::size_t kTinyD1 = 64;
inline constexpr std::size_t kResNetD1 = 512;

// templates
inline constexpr std::size_t kPoolPerClass = 8;
inline constexpr std::size_t kWeightNetCapacityPerClass = 16;
inline constexpr std::size_t kWeightNetChannels = 8;

// losses
inline constexpr std::size_t kMmdKernels = 5;
inline constexpr double kMmdWeight = 1.0;

// data
inline constexpr double kTrainFraction = 0.9;
inline constexpr std::size_t kSubcarriers = 16;
inline constexpr std::size_t kPacketsPerSample = 32;
inline constexpr std::size_t kStride = 16;
inline constexpr double kSampleRate = 32.0;

}  // namespace crossfi::defaults
