#include "tiny_lm.hpp"

namespace cdlab::testing {

namespace {

TinyLm build() {
  auto world = generate_world({12, 4, 2, 1});
  ModelConfig mc;
  mc.vocab_size = world.vocab.size();
  mc.d_model = 16;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.d_mlp = 32;
  LmTrainConfig hp;
  hp.epochs = 150;
  auto model = train_lm(mc, training_corpus(world), hp, nullptr, {}, patch_curriculum(world));
  auto kept = filter_known(model, world);
  return {std::move(world), std::move(model), std::move(kept)};
}

}  // namespace

const TinyLm& tiny_lm() {
  static const TinyLm lm = build();
  return lm;
}

}  // namespace cdlab::testing
