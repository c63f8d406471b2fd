#pragma once

#include <string>

#include "remed/encoder.hpp"
#include "remed/trainer.hpp"

namespace remed::trainer {

// ModelState file: JSON with "config" (everything non-tensor) and "params"
// (name -> shape + f32 little-endian base64). Round-trips bit-exactly.
void save_model(const TrainedModel& model, const encoder::HashEncoderConfig& enc_cfg,
                const std::string& path);

struct LoadedModel {
    TrainedModel model;
    encoder::HashEncoderConfig enc_cfg;
};

LoadedModel load_model(const std::string& path);

}  // namespace remed::trainer
