#pragma once

#include "xmreid/data.hpp"
#include "xmreid/model.hpp"
#include "xmreid/trainer.hpp"

namespace fixture {

inline xmreid::DatasetConfig tiny_data(std::uint64_t seed = 1) {
  xmreid::DatasetConfig c;
  c.identities = 16;
  c.per_identity = 4;
  c.seed = seed;
  c.height = 32;
  c.width = 16;
  return c;
}

inline xmreid::BackboneConfig tiny_model(std::size_t classes, std::size_t parts = 2) {
  xmreid::BackboneConfig c;
  c.stage_channels = {4, 6, 8, 8};
  c.input_height = 32;
  c.input_width = 16;
  c.units_per_stage = 1;
  c.n_parts = parts;
  c.part_dim = 8;
  c.num_identities = classes;
  c.discriminator_hidden = 8;
  return c;
}

inline xmreid::TrainConfig tiny_train(std::uint64_t seed = 1) {
  xmreid::TrainConfig c;
  c.epochs_per_side = 2;
  c.seed = seed;
  c.pk = {4, 4};
  return c;
}

}  // namespace fixture
