#include "cdlab/model.hpp"

#include <algorithm>
#include <cmath>

#include "cdlab/checkpoint.hpp"
#include "cdlab/errors.hpp"
#include "cdlab/ops.hpp"
#include "cdlab/optim.hpp"
#include "cdlab/rng.hpp"

namespace cdlab {

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_mlp == 0 ||
      max_seq == 0) {
    throw ConfigError("model config has a zero dimension");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
}

Tensor PromptCache::hidden(std::size_t layer, std::size_t pos) const {
  if (layer >= residual.size() || pos >= length()) {
    throw ContractError("hook (" + std::to_string(layer) + ", " + std::to_string(pos) +
                        ") outside cached prompt");
  }
  NoGradGuard no_grad;
  return ops::select_row(residual[layer], pos);
}

namespace {

Tensor gaussian(Rng& rng, Shape shape, double stddev) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

ToyLM::ToyLM(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const auto d = config_.d_model, m = config_.d_mlp, V = config_.vocab_size;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double proj_std = w_std / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  tok_emb_ = gaussian(rng, {V, d}, 0.1);
  pos_emb_ = gaussian(rng, {config_.max_seq, d}, 0.1);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    Block b;
    b.ln1_g = Tensor::filled({d}, 1.0);
    b.ln1_b = Tensor::zeros({d});
    b.w_q = gaussian(rng, {d, d}, w_std);
    b.b_q = Tensor::zeros({d});
    b.w_k = gaussian(rng, {d, d}, w_std);
    b.b_k = Tensor::zeros({d});
    b.w_v = gaussian(rng, {d, d}, w_std);
    b.b_v = Tensor::zeros({d});
    b.w_o = gaussian(rng, {d, d}, proj_std);
    b.b_o = Tensor::zeros({d});
    b.ln2_g = Tensor::filled({d}, 1.0);
    b.ln2_b = Tensor::zeros({d});
    b.w_in = gaussian(rng, {d, m}, w_std);
    b.b_in = Tensor::zeros({m});
    b.w_out = gaussian(rng, {m, d}, proj_std / std::sqrt(static_cast<double>(m) / d));
    b.b_out = Tensor::zeros({d});
    blocks_.push_back(std::move(b));
  }
  lnf_g_ = Tensor::filled({d}, 1.0);
  lnf_b_ = Tensor::zeros({d});
  w_u_ = gaussian(rng, {d, V}, w_std);
}

std::vector<std::pair<std::string, Tensor>> ToyLM::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out{{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const auto p = "blocks." + std::to_string(l) + ".";
    out.insert(out.end(), {{p + "ln1_g", b.ln1_g}, {p + "ln1_b", b.ln1_b},
                           {p + "w_q", b.w_q},     {p + "b_q", b.b_q},
                           {p + "w_k", b.w_k},     {p + "b_k", b.b_k},
                           {p + "w_v", b.w_v},     {p + "b_v", b.b_v},
                           {p + "w_o", b.w_o},     {p + "b_o", b.b_o},
                           {p + "ln2_g", b.ln2_g}, {p + "ln2_b", b.ln2_b},
                           {p + "w_in", b.w_in},   {p + "b_in", b.b_in},
                           {p + "w_out", b.w_out}, {p + "b_out", b.b_out}});
  }
  out.insert(out.end(), {{"lnf_g", lnf_g_}, {"lnf_b", lnf_b_}, {"w_u", w_u_}});
  return out;
}

std::vector<Tensor> ToyLM::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void ToyLM::set_trainable(bool on) {
  for (auto& t : parameters()) t.set_requires_grad(on);
}

std::size_t ToyLM::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

void ToyLM::check_tokens(std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw ContractError("empty token sequence");
  if (tokens.size() > config_.max_seq) {
    throw ContractError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq " +
                        std::to_string(config_.max_seq));
  }
  for (auto t : tokens) {
    if (t >= config_.vocab_size) {
      throw IndexError("token id " + std::to_string(t) + " >= vocab_size " +
                       std::to_string(config_.vocab_size));
    }
  }
}

void ToyLM::check_hook(HookPoint hook, std::size_t length) const {
  if (hook.layer >= config_.n_layers || hook.token_pos >= length) {
    throw ContractError("invalid hook (layer " + std::to_string(hook.layer) + ", pos " +
                        std::to_string(hook.token_pos) + ") for " +
                        std::to_string(config_.n_layers) + " layers and " +
                        std::to_string(length) + " tokens");
  }
}

Tensor ToyLM::embed(std::span<const TokenId> tokens) const {
  return ops::add(ops::gather_rows(tok_emb_, tokens), ops::slice_rows(pos_emb_, 0, tokens.size()));
}

ToyLM::BlockOut ToyLM::block_forward(const Block& b, const Tensor& x, std::size_t offset,
                                     const Tensor* k_prefix, const Tensor* v_prefix) const {
  using namespace ops;
  auto a = layer_norm(x, b.ln1_g, b.ln1_b);
  auto q = add_row(matmul(a, b.w_q), b.b_q);
  auto k = add_row(matmul(a, b.w_k), b.b_k);
  auto v = add_row(matmul(a, b.w_v), b.b_v);
  if (k_prefix) {
    k = concat_rows(*k_prefix, k);
    v = concat_rows(*v_prefix, v);
  }
  auto att = causal_attention(q, k, v, config_.n_heads, offset);
  auto h = add(x, add_row(matmul(att, b.w_o), b.b_o));
  auto mlp_in = layer_norm(h, b.ln2_g, b.ln2_b);
  auto mlp = add_row(matmul(gelu(add_row(matmul(mlp_in, b.w_in), b.b_in)), b.w_out), b.b_out);
  return {add(h, mlp), k, v};
}

Tensor ToyLM::head(const Tensor& last_row) const {
  using namespace ops;
  auto n = layer_norm(last_row, lnf_g_, lnf_b_);
  return reshape(matmul(reshape(n, {1, config_.d_model}), w_u_), {config_.vocab_size});
}

Tensor ToyLM::forward_sequence(std::span<const TokenId> tokens) const {
  check_tokens(tokens);
  auto x = embed(tokens);
  for (const auto& b : blocks_) x = block_forward(b, x, 0, nullptr, nullptr).x;
  return ops::matmul(ops::layer_norm(x, lnf_g_, lnf_b_), w_u_);
}

Tensor ToyLM::forward_sequence_patched(std::span<const TokenId> tokens, HookPoint hook,
                                       const Tensor& h_new) const {
  check_tokens(tokens);
  check_hook(hook, tokens.size());
  if (h_new.numel() != config_.d_model) {
    throw DimensionError("patch vector " + shape_str(h_new.shape()) + " for d_model " +
                         std::to_string(config_.d_model));
  }
  auto x = embed(tokens);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    x = block_forward(blocks_[l], x, 0, nullptr, nullptr).x;
    if (l == hook.layer) x = ops::replace_row(x, hook.token_pos, h_new);
  }
  return ops::matmul(ops::layer_norm(x, lnf_g_, lnf_b_), w_u_);
}

Tensor ToyLM::forward(std::span<const TokenId> tokens) const {
  check_tokens(tokens);
  auto x = embed(tokens);
  for (const auto& b : blocks_) x = block_forward(b, x, 0, nullptr, nullptr).x;
  return head(ops::select_row(x, tokens.size() - 1));
}

ReadResult ToyLM::forward_with_read(std::span<const TokenId> tokens, HookPoint hook) const {
  check_tokens(tokens);
  check_hook(hook, tokens.size());
  auto x = embed(tokens);
  Tensor h;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    x = block_forward(blocks_[l], x, 0, nullptr, nullptr).x;
    if (l == hook.layer) h = ops::select_row(x, hook.token_pos);
  }
  return {head(ops::select_row(x, tokens.size() - 1)), h};
}

Tensor ToyLM::forward_with_patch(std::span<const TokenId> tokens, HookPoint hook,
                                 const Tensor& h_new) const {
  auto cache = prepare(tokens);
  return run_patched(cache, hook, h_new).logits;
}

TokenId ToyLM::greedy_answer(std::span<const TokenId> tokens) const {
  NoGradGuard no_grad;
  auto logits = forward(tokens);
  const auto& v = logits.values();
  return static_cast<TokenId>(std::max_element(v.begin(), v.end()) - v.begin());
}

PromptCache ToyLM::prepare(std::span<const TokenId> tokens) const {
  check_tokens(tokens);
  NoGradGuard no_grad;
  PromptCache cache;
  cache.tokens.assign(tokens.begin(), tokens.end());
  auto x = embed(tokens);
  for (const auto& b : blocks_) {
    auto out = block_forward(b, x, 0, nullptr, nullptr);
    x = out.x;
    cache.residual.push_back(out.x);
    cache.keys.push_back(out.k);
    cache.values.push_back(out.v);
  }
  cache.logits = head(ops::select_row(x, tokens.size() - 1));
  return cache;
}

PatchedRun ToyLM::run_patched(const PromptCache& cache, HookPoint hook, const Tensor& h_new,
                              bool collect_downstream) const {
  check_hook(hook, cache.length());
  if (h_new.numel() != config_.d_model) {
    throw DimensionError("patch vector " + shape_str(h_new.shape()) + " for d_model " +
                         std::to_string(config_.d_model));
  }
  const auto T = cache.length();
  const auto p = hook.token_pos;
  Tensor x;
  {
    NoGradGuard no_grad;
    x = ops::slice_rows(cache.residual[hook.layer], p, T);
  }
  x = ops::replace_row(x, 0, h_new);
  PatchedRun run;
  for (std::size_t l = hook.layer + 1; l < blocks_.size(); ++l) {
    if (p > 0) {
      Tensor kp, vp;
      {
        NoGradGuard no_grad;
        kp = ops::slice_rows(cache.keys[l], 0, p);
        vp = ops::slice_rows(cache.values[l], 0, p);
      }
      x = block_forward(blocks_[l], x, p, &kp, &vp).x;
    } else {
      x = block_forward(blocks_[l], x, 0, nullptr, nullptr).x;
    }
    if (collect_downstream) run.downstream.push_back(ops::select_row(x, 0));
  }
  run.logits = head(ops::select_row(x, T - p - 1));
  return run;
}

void ToyLM::save(const std::filesystem::path& path) const {
  Checkpoint c;
  c.kind = "toy-lm";
  c.set("vocab_size", std::to_string(config_.vocab_size));
  c.set("d_model", std::to_string(config_.d_model));
  c.set("n_layers", std::to_string(config_.n_layers));
  c.set("n_heads", std::to_string(config_.n_heads));
  c.set("d_mlp", std::to_string(config_.d_mlp));
  c.set("max_seq", std::to_string(config_.max_seq));
  c.set("seed", std::to_string(config_.seed));
  for (auto& [name, t] : named_parameters()) c.records.emplace_back(name, t.detach());
  write_checkpoint(path, c);
}

ToyLM ToyLM::load(const std::filesystem::path& path) {
  auto c = read_checkpoint(path);
  if (c.kind != "toy-lm") throw FormatError(path.string() + ": expected toy-lm, found " + c.kind);
  ModelConfig cfg;
  cfg.vocab_size = std::stoul(c.get("vocab_size"));
  cfg.d_model = std::stoul(c.get("d_model"));
  cfg.n_layers = std::stoul(c.get("n_layers"));
  cfg.n_heads = std::stoul(c.get("n_heads"));
  cfg.d_mlp = std::stoul(c.get("d_mlp"));
  cfg.max_seq = std::stoul(c.get("max_seq"));
  cfg.seed = std::stoull(c.get("seed"));
  ToyLM model(cfg);
  for (auto& [name, t] : model.named_parameters()) {
    const auto& src = c.tensor(name);
    if (src.shape() != t.shape()) {
      throw FormatError(path.string() + ": record " + name + " has shape " +
                        shape_str(src.shape()) + ", expected " + shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    std::copy(src.values().begin(), src.values().end(), dst.begin());
  }
  return model;
}

PatchCurriculum patch_curriculum(const World& world) {
  PatchCurriculum c;
  for (auto a : kAttributes) {
    std::vector<PatchCurriculum::Item> items;
    for (const auto& f : world.facts) items.push_back({build_prompt(world.vocab, f.city).get(a), f.attribute(a)});
    c.templates.push_back(std::move(items));
  }
  return c;
}

namespace {

Tensor patched_example_loss(const ToyLM& model, const PatchCurriculum& curriculum, Rng& rng) {
  const auto& items = curriculum.templates[rng.below(curriculum.templates.size())];
  const auto& base = items[rng.below(items.size())];
  const auto& source = items[rng.below(items.size())];
  const auto layers = model.config().n_layers;
  const std::size_t layer = layers > 1 ? rng.below(layers - 1) : 0;
  const HookPoint hook{layer, query_position(base.prompt)};
  auto h = model.forward_with_read(source.prompt, {layer, query_position(source.prompt)}).hidden;
  auto logits = model.forward_sequence_patched(base.prompt, hook, h);
  return ops::softmax_cross_entropy(ops::select_row(logits, base.prompt.size() - 1), source.answer);
}

}  // namespace

ToyLM train_lm(const ModelConfig& config, const std::vector<std::vector<TokenId>>& corpus,
               const LmTrainConfig& hp, LmTrainLog* log,
               const std::function<void(std::size_t, double)>& on_epoch,
               const PatchCurriculum& curriculum) {
  if (corpus.empty()) throw ContractError("train_lm: empty corpus");
  if (hp.batch == 0) throw ConfigError("train_lm: batch must be positive");
  ToyLM model(config);
  model.set_trainable(true);
  Adam adam(model.parameters(), {hp.lr, 0.9, 0.999, 1e-8});
  Rng rng(hp.seed);
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += hp.batch) {
      const auto end = std::min(order.size(), start + hp.batch);
      const double w = 1.0 / static_cast<double>(end - start);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& seq = corpus[order[i]];
        if (seq.size() < 2) throw ContractError("train_lm: sequence shorter than 2 tokens");
        std::span<const TokenId> all(seq);
        auto logits = model.forward_sequence(all.first(seq.size() - 1));
        auto loss = ops::scale(ops::softmax_cross_entropy(logits, all.subspan(1)), w);
        batch_loss += loss.item();
        backward(loss);
        if (!curriculum.empty() && rng.uniform() < hp.patch_rate) {
          auto extra = ops::scale(patched_example_loss(model, curriculum, rng), w);
          batch_loss += extra.item();
          backward(extra);
        }
      }
      ++step;
      if (!std::isfinite(batch_loss)) {
        throw TrainingError("train_lm: non-finite loss at step " + std::to_string(step) +
                            " (epoch " + std::to_string(epoch) + ")");
      }
      adam.step();
      epoch_loss += batch_loss * static_cast<double>(end - start);
    }
    epoch_loss /= static_cast<double>(order.size());
    if (log) log->epoch_loss.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss);
  }
  model.set_trainable(false);
  return model;
}

std::vector<CityFact> filter_known(const ToyLM& model, const World& world) {
  std::vector<CityFact> kept;
  for (const auto& f : world.facts) {
    auto pp = build_prompt(world.vocab, f.city);
    bool ok = true;
    for (auto a : kAttributes) ok = ok && model.greedy_answer(pp.get(a)) == f.attribute(a);
    if (ok) kept.push_back(f);
  }
  if (kept.size() < 2) {
    throw PipelineError("filter_known: only " + std::to_string(kept.size()) +
                        " cities answered correctly on both prompts (need >= 2)");
  }
  return kept;
}

}  // namespace cdlab
