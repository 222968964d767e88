#include "vqtok/ar_probe.hpp"

#include "vqtok/binary_io.hpp"
#include "vqtok/errors.hpp"
#include "vqtok/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace vqtok::probe {

namespace {

constexpr char kShardMagic[4] = {'G', 'T', 'K', 'S'};
constexpr uint32_t kShardVersion = 1;

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

void ARConfig::validate() const {
  if (blocks < 1 || heads < 1 || width < 1) throw ValidationError("ar_shape", "AR blocks/heads/width must be >= 1");
  if (width % heads != 0) throw ValidationError("ar_heads", "AR width must be divisible by heads");
  if (vocab < 1 || token_count < 1 || num_classes < 1) {
    throw ValidationError("ar_shape", "AR vocab, token count and class count must be >= 1");
  }
  if (label_dropout < 0.0 || label_dropout >= 1.0) throw ValidationError("label_dropout", "must lie in [0, 1)");
}

ARModelImpl::ARModelImpl(const ARConfig& config) : config_(config) {
  config.validate();
  token_emb_ = register_module("token_emb", torch::nn::Embedding(config.vocab, config.width));
  class_emb_ = register_module("class_emb", torch::nn::Embedding(config.num_classes + 1, config.width));
  pos_emb_ = register_parameter("pos_emb", torch::empty({1, config.token_count + 1, config.width}).normal_(0.0, 0.02));
  {
    torch::NoGradGuard no_grad;
    token_emb_->weight.normal_(0.0, 0.02);
    class_emb_->weight.normal_(0.0, 0.02);
  }
  blocks_ = torch::nn::ModuleList();
  for (int64_t i = 0; i < config.blocks; ++i) blocks_->push_back(layers::SelfAttentionBlock(config.width, config.heads));
  register_module("blocks", blocks_);
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.width})));
  head_ = register_module("head", torch::nn::Linear(config.width, config.vocab));
  {
    torch::NoGradGuard no_grad;
    head_->weight.normal_(0.0, 0.02);
    head_->bias.zero_();
  }
}

torch::Tensor ARModelImpl::embed(const torch::Tensor& tokens, const torch::Tensor& classes) {
  const int64_t len = tokens.size(1);
  TORCH_CHECK(len <= config_.token_count, "prefix longer than the token count");
  auto cls = class_emb_(classes).unsqueeze(1);
  auto x = len > 0 ? torch::cat({cls, token_emb_(tokens)}, 1) : cls;
  return x + pos_emb_.narrow(1, 0, len + 1);
}

torch::Tensor ARModelImpl::hidden(const torch::Tensor& tokens, const torch::Tensor& classes, int64_t layers) {
  auto x = embed(tokens, classes);
  int64_t i = 0;
  for (auto& block : *blocks_) {
    if (i++ >= layers) break;
    x = block->as<layers::SelfAttentionBlock>()->forward(x, /*causal=*/true);
  }
  return x;
}

torch::Tensor ARModelImpl::forward(const torch::Tensor& tokens, const torch::Tensor& classes) {
  return head_(norm_(hidden(tokens, classes, config_.blocks)));
}

torch::Tensor TokenShard::token_tensor() const {
  return torch::tensor(tokens, torch::kInt32).to(torch::kInt64).reshape({count(), token_count});
}

torch::Tensor TokenShard::label_tensor() const { return torch::tensor(labels, torch::kInt32).to(torch::kInt64); }

void TokenShard::write(const std::filesystem::path& path) const {
  std::ostringstream out(std::ios::binary);
  out.write(kShardMagic, 4);
  io::write_u32(out, kShardVersion);
  io::write_string(out, tokenizer_id);
  io::write_u32(out, static_cast<uint32_t>(vocab));
  io::write_u32(out, static_cast<uint32_t>(token_count));
  io::write_u64(out, static_cast<uint64_t>(count()));
  for (int64_t i = 0; i < count(); ++i) {
    io::write_i32(out, labels[static_cast<size_t>(i)]);
    for (int64_t t = 0; t < token_count; ++t) io::write_i32(out, tokens[static_cast<size_t>(i * token_count + t)]);
  }
  io::atomic_write(path, out.str());
}

TokenShard TokenShard::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open token shard " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kShardMagic, 4)) {
    throw FormatError("bad token shard magic in " + path.string());
  }
  if (io::read_u32(in) != kShardVersion) throw FormatError("unsupported token shard version");
  TokenShard s;
  s.tokenizer_id = io::read_string(in);
  s.vocab = io::read_u32(in);
  s.token_count = io::read_u32(in);
  const uint64_t count = io::read_u64(in);
  s.labels.reserve(count);
  s.tokens.reserve(count * static_cast<uint64_t>(s.token_count));
  for (uint64_t i = 0; i < count; ++i) {
    s.labels.push_back(io::read_i32(in));
    for (int64_t t = 0; t < s.token_count; ++t) {
      const int32_t id = io::read_i32(in);
      if (id < 0 || id >= s.vocab) throw FormatError("token id out of vocabulary range");
      s.tokens.push_back(id);
    }
  }
  return s;
}

TokenShard extract_tokens(net::Tokenizer& tokenizer, const LabeledImages& data, const std::string& tokenizer_id,
                          int64_t batch_size) {
  torch::NoGradGuard no_grad;
  TokenShard shard;
  shard.tokenizer_id = tokenizer_id;
  shard.vocab = tokenizer->config().codebook_size;
  shard.token_count = tokenizer->config().tokens();
  for (int64_t start = 0; start < data.size(); start += batch_size) {
    const int64_t n = std::min(batch_size, data.size() - start);
    auto ids = tokenizer->tokenize(data.images.narrow(0, start, n)).to(torch::kInt32).contiguous();
    shard.tokens.insert(shard.tokens.end(), ids.data_ptr<int32_t>(), ids.data_ptr<int32_t>() + ids.numel());
  }
  for (auto l : data.labels) shard.labels.push_back(static_cast<int32_t>(l));
  return shard;
}

double token_cross_entropy(const torch::Tensor& logits, const torch::Tensor& targets) {
  return torch::nn::functional::cross_entropy(logits.reshape({-1, logits.size(-1)}).to(torch::kFloat64),
                                              targets.reshape({-1}))
      .item<double>();
}

ARTrainResult ar_train(const TokenShard& train, const ARConfig& config, const ProbeBudget& budget, uint64_t seed) {
  config.validate();
  if (train.vocab != config.vocab) {
    throw ValidationError("vocab_match", "token shard vocab " + std::to_string(train.vocab) +
                                             " != AR vocab " + std::to_string(config.vocab));
  }
  if (train.token_count != config.token_count) {
    throw ValidationError("token_count_match", "token shard T differs from the AR config");
  }
  if (train.count() == 0) throw ValidationError("empty_set", "AR training needs at least one sequence");

  torch::manual_seed(seed);
  ARTrainResult result;
  result.model = ARModel(config);
  auto& model = result.model;
  model->train();

  auto tokens = train.token_tensor();
  auto labels = train.label_tensor();
  const int64_t n = train.count();
  const int64_t bs = std::min(budget.batch_size, n);
  const int64_t steps_per_epoch = (n + bs - 1) / bs;
  auto schedule = budget.schedule;
  schedule.steps_per_epoch = steps_per_epoch;
  schedule.total_steps = std::max<int64_t>(1, budget.epochs * steps_per_epoch);
  if (schedule.warmup_steps() >= schedule.total_steps) schedule.warmup_epochs = 0.0;

  torch::optim::AdamW optimizer(model->parameters(), torch::optim::AdamWOptions(schedule.base_lr)
                                                         .betas({0.9, 0.95})
                                                         .weight_decay(budget.weight_decay));
  std::vector<int64_t> order(static_cast<size_t>(n));
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < budget.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (int64_t start = 0; start < n; start += bs) {
      const int64_t m = std::min(bs, n - start);
      std::vector<int64_t> rows(order.begin() + start, order.begin() + start + m);
      auto idx = torch::tensor(rows, torch::kInt64);
      auto batch = tokens.index_select(0, idx);
      auto cls = labels.index_select(0, idx).clone();
      auto cls_acc = cls.accessor<int64_t, 1>();
      for (int64_t i = 0; i < m; ++i) {
        if (uniform01(rng) < config.label_dropout) cls_acc[i] = config.null_class();
      }
      for (auto& group : optimizer.param_groups()) {
        static_cast<torch::optim::AdamWOptions&>(group.options()).lr(objectives::lr_at(step, schedule));
      }
      auto logits = model->forward(batch.narrow(1, 0, config.token_count - 1), cls);
      auto loss = torch::nn::functional::cross_entropy(logits.reshape({-1, config.vocab}), batch.reshape({-1}));
      optimizer.zero_grad();
      loss.backward();
      torch::nn::utils::clip_grad_norm_(model->parameters(), 1.0);
      optimizer.step();
      result.loss_curve.push_back(loss.item<double>());
      ++step;
    }
  }
  result.steps = step;
  model->eval();
  return result;
}

double ar_validation_loss(ARModel& model, const TokenShard& heldout, int64_t batch_size) {
  if (heldout.count() == 0) throw ValidationError("empty_set", "validation loss needs a non-empty held-out set");
  if (heldout.vocab != model->config().vocab) throw ValidationError("vocab_match", "held-out vocab mismatch");
  torch::NoGradGuard no_grad;
  auto tokens = heldout.token_tensor();
  auto labels = heldout.label_tensor();
  const int64_t t = heldout.token_count;
  double total = 0.0;
  for (int64_t start = 0; start < heldout.count(); start += batch_size) {
    const int64_t m = std::min(batch_size, heldout.count() - start);
    auto batch = tokens.narrow(0, start, m);
    auto logits = model->forward(batch.narrow(1, 0, t - 1), labels.narrow(0, start, m));
    auto ce = torch::nn::functional::cross_entropy(
        logits.reshape({-1, logits.size(-1)}).to(torch::kFloat64), batch.reshape({-1}),
        torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kSum));
    total += ce.item<double>();
  }
  return total / static_cast<double>(heldout.count() * t);
}

int64_t CFGSchedule::unguided_steps(int64_t token_count) const {
  return static_cast<int64_t>(std::ceil(unguided_fraction * static_cast<double>(token_count) - 1e-9));
}

void CFGSchedule::validate() const {
  if (guidance_scale < 1.0) throw ValidationError("cfg_scale", "guidance scale must be >= 1");
  if (unguided_fraction < 0.0 || unguided_fraction > 1.0) {
    throw ValidationError("cfg_fraction", "unguided fraction must lie in [0, 1]");
  }
}

torch::Tensor guided_logits(const torch::Tensor& cond, const torch::Tensor& uncond, double scale) {
  if (scale == 1.0) return cond;
  return uncond + scale * (cond - uncond);
}

SampleTrace sample_tokens(const LogitFn& logits_fn, const torch::Tensor& classes, int64_t null_class,
                          int64_t token_count, const CFGSchedule& cfg, uint64_t seed) {
  cfg.validate();
  torch::NoGradGuard no_grad;
  const int64_t b = classes.size(0);
  const int64_t unguided = cfg.unguided_steps(token_count);
  auto null_classes = torch::full({b}, null_class, torch::kInt64);
  std::mt19937_64 rng(seed);
  SampleTrace trace;
  auto tokens = torch::zeros({b, 0}, torch::kInt64);
  for (int64_t t = 0; t < token_count; ++t) {
    auto cond = logits_fn(tokens, classes);
    torch::Tensor logits = cond;
    if (t >= unguided && cfg.guidance_scale != 1.0) {
      logits = guided_logits(cond, logits_fn(tokens, null_classes), cfg.guidance_scale);
    }
    trace.step_logits.push_back(logits);
    auto probs = torch::softmax(logits.to(torch::kFloat64), -1).contiguous();
    auto p = probs.accessor<double, 2>();
    auto next = torch::empty({b, 1}, torch::kInt64);
    for (int64_t i = 0; i < b; ++i) {
      const double u = uniform01(rng);
      double acc = 0.0;
      int64_t pick = p.size(1) - 1;
      for (int64_t k = 0; k < p.size(1); ++k) {
        acc += p[i][k];
        if (u < acc) {
          pick = k;
          break;
        }
      }
      next[i][0] = pick;
    }
    tokens = torch::cat({tokens, next}, 1);
  }
  trace.tokens = tokens;
  return trace;
}

torch::Tensor ar_sample(ARModel& model, const torch::Tensor& classes, const CFGSchedule& cfg, uint64_t seed) {
  model->eval();
  LogitFn fn = [&model](const torch::Tensor& prefix, const torch::Tensor& cls) {
    auto logits = model->forward(prefix, cls);
    return logits.select(1, logits.size(1) - 1);
  };
  return sample_tokens(fn, classes, model->config().null_class(), model->config().token_count, cfg, seed).tokens;
}

torch::Tensor probe_features(ARModel& model, const TokenShard& shard, int64_t batch_size) {
  torch::NoGradGuard no_grad;
  auto tokens = shard.token_tensor();
  const int64_t layer = model->config().middle_layer();
  std::vector<torch::Tensor> parts;
  for (int64_t start = 0; start < shard.count(); start += batch_size) {
    const int64_t m = std::min(batch_size, shard.count() - start);
    auto cls = torch::full({m}, model->config().null_class(), torch::kInt64);
    auto h = model->hidden(tokens.narrow(0, start, m), cls, layer);
    parts.push_back(h.narrow(1, 1, shard.token_count).mean(1));
  }
  return torch::cat(parts, 0);
}

double linear_probe(const torch::Tensor& train_features, const torch::Tensor& train_labels,
                    const torch::Tensor& eval_features, const torch::Tensor& eval_labels) {
  auto ytr = train_labels.to(torch::kInt64);
  auto yev = eval_labels.to(torch::kInt64);
  if (std::get<0>(torch::_unique(ytr)).numel() < 2) {
    throw ValidationError("probe_classes", "linear probing needs at least 2 classes");
  }
  if (eval_features.size(0) == 0) throw ValidationError("empty_set", "linear probe eval split is empty");
  const int64_t classes = std::max(ytr.max().item<int64_t>(), yev.max().item<int64_t>()) + 1;
  auto xtr = train_features.detach().to(torch::kFloat64);
  auto mean = xtr.mean(0);
  auto std = xtr.std(0, /*unbiased=*/false).clamp_min(1e-6);
  xtr = (xtr - mean) / std;
  auto xev = (eval_features.detach().to(torch::kFloat64) - mean) / std;

  torch::AutoGradMode enable(true);
  auto weight = torch::zeros({xtr.size(1), classes}, torch::TensorOptions().dtype(torch::kFloat64).requires_grad(true));
  auto bias = torch::zeros({classes}, torch::TensorOptions().dtype(torch::kFloat64).requires_grad(true));
  constexpr double l2 = 1e-3;
  torch::optim::LBFGS opt({weight, bias}, torch::optim::LBFGSOptions(1.0)
                                              .max_iter(500)
                                              .tolerance_grad(1e-9)
                                              .tolerance_change(1e-12)
                                              .history_size(20)
                                              .line_search_fn("strong_wolfe"));
  auto closure = [&] {
    opt.zero_grad();
    auto logits = torch::matmul(xtr, weight) + bias;
    auto loss = torch::nn::functional::cross_entropy(logits, ytr) + l2 * weight.pow(2).sum();
    loss.backward();
    return loss;
  };
  for (int round = 0; round < 4; ++round) opt.step(closure);
  torch::NoGradGuard no_grad;
  auto pred = (torch::matmul(xev, weight) + bias).argmax(1);
  return pred.eq(yev).to(torch::kFloat64).mean().item<double>();
}

std::string ProbeReport::to_json() const {
  nlohmann::ordered_json j;
  j["tokenizer_id"] = tokenizer_id;
  j["seed"] = seed;
  j["ar_steps"] = ar_steps;
  j["val_loss"] = val_loss;
  j["fid_proxy"] = fid_proxy;
  j["linear_probe_acc"] = linear_probe_acc;
  j["codebook_usage"] = codebook_usage;
  return j.dump(2) + "\n";
}

ProbeReport ProbeReport::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  ProbeReport r;
  r.tokenizer_id = j.at("tokenizer_id").get<std::string>();
  r.seed = j.at("seed").get<uint64_t>();
  r.ar_steps = j.at("ar_steps").get<int64_t>();
  r.val_loss = j.at("val_loss").get<double>();
  r.fid_proxy = j.at("fid_proxy").get<double>();
  r.linear_probe_acc = j.at("linear_probe_acc").get<double>();
  r.codebook_usage = j.at("codebook_usage").get<double>();
  return r;
}

ProbeReport run_probe(net::Tokenizer& tokenizer, const std::string& tokenizer_id, const ProbeData& data,
                      ARConfig ar_config, const ProbeBudget& budget, features::FeatureExtractor& extractor,
                      uint64_t seed, const ProbeArtifacts& artifacts) {
  tokenizer->eval();
  auto train = extract_tokens(tokenizer, data.train, tokenizer_id);
  auto val = extract_tokens(tokenizer, data.val, tokenizer_id);
  auto eval = extract_tokens(tokenizer, data.probe_eval, tokenizer_id);
  if (!artifacts.directory.empty()) {
    std::filesystem::create_directories(artifacts.directory);
    train.write(artifacts.directory / "train.shard");
    val.write(artifacts.directory / "val.shard");
    eval.write(artifacts.directory / "probe_eval.shard");
  }

  ProbeReport report;
  report.tokenizer_id = tokenizer_id;
  report.seed = seed;
  {
    std::vector<char> seen(static_cast<size_t>(train.vocab), 0);
    int64_t distinct = 0;
    for (auto id : train.tokens) {
      if (!seen[static_cast<size_t>(id)]) {
        seen[static_cast<size_t>(id)] = 1;
        ++distinct;
      }
    }
    report.codebook_usage = static_cast<double>(distinct) / static_cast<double>(train.vocab);
  }

  ar_config.vocab = train.vocab;
  ar_config.token_count = train.token_count;
  ar_config.num_classes = data.num_classes;
  auto trained = ar_train(train, ar_config, budget, seed);
  report.ar_steps = trained.steps;
  report.val_loss = ar_validation_loss(trained.model, val);

  report.linear_probe_acc = linear_probe(probe_features(trained.model, train), train.label_tensor(),
                                         probe_features(trained.model, eval), eval.label_tensor());

  torch::NoGradGuard no_grad;
  std::vector<int64_t> cls(static_cast<size_t>(budget.generated_samples));
  for (size_t i = 0; i < cls.size(); ++i) cls[i] = static_cast<int64_t>(i) % data.num_classes;
  CFGSchedule cfg{budget.guidance_scale, budget.unguided_fraction};
  auto tokens = ar_sample(trained.model, torch::tensor(cls, torch::kInt64), cfg, mix_seed(seed, 0xf1d));
  std::vector<torch::Tensor> images;
  for (int64_t start = 0; start < tokens.size(0); start += 64) {
    const int64_t m = std::min<int64_t>(64, tokens.size(0) - start);
    images.push_back(tokenizer->decode_indices(tokens.narrow(0, start, m)).images);
  }
  report.fid_proxy = metrics::fid_proxy(data.val.images, torch::cat(images, 0), extractor);

  if (!artifacts.directory.empty()) {
    std::ostringstream curve;
    curve << "step,loss\n";
    for (size_t i = 0; i < trained.loss_curve.size(); ++i) curve << i << ',' << trained.loss_curve[i] << '\n';
    io::atomic_write(artifacts.directory / "ar_loss.csv", curve.str());
  }
  return report;
}

}  // namespace vqtok::probe
