#include "vqtok/train.hpp"

#include "vqtok/binary_io.hpp"
#include "vqtok/errors.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace vqtok::harness {

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void set_lr(torch::optim::AdamW& opt, double lr) {
  for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
}

std::unique_ptr<torch::optim::AdamW> make_adamw(std::vector<torch::Tensor> params, double lr) {
  return std::make_unique<torch::optim::AdamW>(
      std::move(params), torch::optim::AdamWOptions(lr).betas({0.9, 0.95}).weight_decay(0.0));
}

}  // namespace

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::string format_metrics_row(const MetricsRow& r) {
  std::string s = std::to_string(r.step);
  for (double v : {r.lr, r.recon, r.perceptual, r.gan_g, r.gan_d, r.vq, r.entropy, r.sem_reg, r.total, r.usage}) {
    s += ',' + fmt17(v);
  }
  return s;
}

std::vector<MetricsRow> read_metrics(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw FormatError("cannot open metrics file " + csv.string());
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw FormatError("unexpected metrics header in " + csv.string());
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 11) throw FormatError("malformed metrics row: " + line);
    MetricsRow r;
    r.step = std::stoll(cells[0]);
    double* fields[] = {&r.lr, &r.recon, &r.perceptual, &r.gan_g, &r.gan_d, &r.vq, &r.entropy, &r.sem_reg, &r.total,
                        &r.usage};
    for (size_t i = 0; i < 10; ++i) *fields[i] = std::stod(cells[i + 1]);
    rows.push_back(r);
  }
  return rows;
}

TokenizerTrainer::TokenizerTrainer(const ExperimentConfig& config, const Corpus& corpus)
    : config_(config), corpus_(corpus) {
  config_.validate();
  if (corpus.train.size() == 0) throw ValidationError("empty_set", "training split is empty");
  if (corpus.train.images.size(2) != config.tokenizer.image_size) {
    throw ValidationError("image_resolution", "corpus images do not match tokenizer.image_size");
  }
  const int64_t n = corpus.train.size();
  const int64_t bs = std::min(config.train.batch_size, n);
  steps_per_epoch_ = (n + bs - 1) / bs;

  torch::manual_seed(config.seed);
  tokenizer_ = net::Tokenizer(config.tokenizer);
  torch::manual_seed(mix_seed(config.seed, 1));
  const auto disc_start =
      static_cast<int64_t>(std::llround(config.train.disc_start_fraction * static_cast<double>(config.train.steps)));
  disc_ = objectives::Discriminator(disc_start);
  extractor_ = features::default_extractor();

  auto gen_params = tokenizer_->parameters();
  if (sem_reg_active()) {
    const auto& sr = config.sem_reg;
    switch (sr.teacher) {
      case semantic::TeacherSource::frozen_random:
        teacher_.emplace(semantic::FrozenRandomTeacher(sr.teacher_channels, sr.teacher_seed));
        for (const auto& p : teacher_->frozen_teacher()->parameters()) {
          if (p.requires_grad()) throw std::logic_error("teacher parameters must stay frozen");
        }
        break;
      case semantic::TeacherSource::precomputed_file:
        teacher_.emplace(semantic::TeacherFeatureStore::from_archive(sr.archive_path));
        break;
      case semantic::TeacherSource::external_encoder:
        throw ValidationError("teacher_source", "external encoders can only be attached through the library API");
    }
    torch::manual_seed(mix_seed(config.seed, 2));
    const int64_t width = net::size_tier(config.tokenizer.decoder_tier).width;
    const int64_t channels = sr.teacher == semantic::TeacherSource::precomputed_file
                                 ? teacher_->fetch({corpus.train.ids[0]}, corpus.train.images.narrow(0, 0, 1)).values.size(2)
                                 : sr.teacher_channels;
    projector_ = semantic::Projector(width, channels);
    for (auto& p : projector_->parameters()) gen_params.push_back(p);
  }
  gen_opt_ = make_adamw(gen_params, config.schedule.base_lr);
  disc_opt_ = make_adamw(disc_->parameters(), config.schedule.base_lr);
}

std::vector<int64_t> TokenizerTrainer::batch_rows(int64_t step) const {
  const int64_t n = corpus_.train.size();
  const int64_t bs = std::min(config_.train.batch_size, n);
  const int64_t epoch = step / steps_per_epoch_;
  const int64_t offset = (step % steps_per_epoch_) * bs;
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(config_.seed, 0x1000 + static_cast<uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  const int64_t end = std::min(n, offset + bs);
  return {order.begin() + offset, order.begin() + end};
}

MetricsRow TokenizerTrainer::run_step() {
  tokenizer_->train();
  const auto rows = batch_rows(step_);
  auto x = corpus_.train.images.index_select(0, torch::tensor(rows, torch::kInt64));
  const double lr = objectives::lr_at(step_, config_.schedule);
  set_lr(*gen_opt_, lr);
  set_lr(*disc_opt_, lr);

  const auto& w = config_.losses;
  vq::QuantizeOptions qopt;
  qopt.grad_mode = config_.tokenizer.grad_mode;
  qopt.with_posterior = w.entropy > 0.0;
  qopt.temperature = config_.train.posterior_temperature;
  qopt.track_usage = true;
  auto usage_state = tokenizer_->codebook->named_buffers();
  std::vector<torch::Tensor> usage_backup;
  for (auto& b : usage_state) usage_backup.push_back(b.value().clone());

  auto out = tokenizer_->forward(x, qopt);
  objectives::LossTerms terms;
  terms.recon = objectives::recon_loss(x, out.reconstruction);
  if (w.perceptual > 0.0) terms.perceptual = objectives::perceptual_loss(x, out.reconstruction, *extractor_);
  terms.vq = vq::vq_codebook_loss(out.latents.pre_quant, out.latents.selected_codes, w.commitment);
  if (w.entropy > 0.0) terms.entropy = vq::entropy_loss(out.latents.posterior);
  objectives::GanLosses gan;
  const bool disc_active = w.gan > 0.0 && disc_->active(step_);
  if (disc_active) {
    gan = objectives::gan_losses(x, out.reconstruction, disc_, step_);
    terms.gan_g = gan.gan_g;
    terms.gan_d = gan.gan_d;
  }
  if (sem_reg_active()) {
    std::vector<std::string> ids;
    for (auto r : rows) ids.push_back(corpus_.train.ids[static_cast<size_t>(r)]);
    auto teacher = teacher_->fetch(ids, x);
    auto dec = out.decoder_features.at(static_cast<size_t>(config_.sem_reg.align_layer - 1));
    auto pairs = semantic::align_grids(dec, teacher);
    terms.sem_reg = semantic::semantic_reg_loss(pairs.decoder, pairs.teacher, projector_);
  }

  objectives::LossBundle bundle;
  try {
    bundle = objectives::total_loss(terms, w);
  } catch (const NonFiniteLoss&) {
    // Leave the usage window as it was before this step so the diagnostic
    // snapshot matches the last good state.
    torch::NoGradGuard no_grad;
    for (size_t i = 0; i < usage_state.size(); ++i) usage_state[i].value().copy_(usage_backup[i]);
    throw;
  }
  gen_opt_->zero_grad();
  bundle.total_tensor.backward();
  gen_opt_->step();

  if (disc_active) {
    disc_opt_->zero_grad();
    gan.gan_d.backward();
    disc_opt_->step();
  }

  MetricsRow row;
  row.step = step_;
  row.lr = lr;
  row.recon = bundle.recon;
  row.perceptual = bundle.perceptual;
  row.gan_g = bundle.gan_g;
  row.gan_d = bundle.gan_d;
  row.vq = bundle.vq;
  row.entropy = bundle.entropy;
  row.sem_reg = bundle.sem_reg;
  row.total = bundle.total;
  row.usage = tokenizer_->codebook->usage(config_.tokenizer.usage_window);
  ++step_;
  return row;
}

Checkpoint TokenizerTrainer::snapshot() const {
  Checkpoint c;
  c.config_digest = config_.digest();
  c.step = step_;
  c.config_text = config_.canonical_text();
  c.sections.push_back(module_section("tokenizer", *tokenizer_));
  c.sections.push_back(module_section("discriminator", *disc_));
  if (projector_) c.sections.push_back(module_section("projector", *projector_));
  c.sections.push_back(adamw_section("optimizer.generator", *gen_opt_));
  c.sections.push_back(adamw_section("optimizer.discriminator", *disc_opt_));
  return c;
}

void TokenizerTrainer::restore(const Checkpoint& c) {
  if (c.config_digest != config_.digest()) {
    throw ValidationError("config_digest", "checkpoint was written by a different config (digest " +
                                               io::hex64(c.config_digest) + " vs " + io::hex64(config_.digest()) + ")");
  }
  auto need = [&](const char* name) -> const Section& {
    const auto* s = c.section(name);
    if (!s) throw ValidationError("checkpoint_missing", std::string("checkpoint lacks section ") + name);
    return *s;
  };
  load_module_section(need("tokenizer"), *tokenizer_);
  load_module_section(need("discriminator"), *disc_);
  if (projector_) load_module_section(need("projector"), *projector_);
  load_adamw_section(need("optimizer.generator"), *gen_opt_);
  load_adamw_section(need("optimizer.discriminator"), *disc_opt_);
  step_ = c.step;
}

TrainOutcome train_tokenizer(const ExperimentConfig& config, const Corpus& corpus, const std::filesystem::path& run_dir,
                             const TrainOptions& options) {
  std::filesystem::create_directories(run_dir);
  const auto ckpt_path = run_dir / "checkpoint.gtkc";
  const auto csv_path = run_dir / "metrics.csv";
  TokenizerTrainer trainer(config, corpus);

  std::vector<std::string> kept_rows;
  if (options.resume && std::filesystem::exists(ckpt_path)) {
    trainer.restore(Checkpoint::read(ckpt_path));
    if (std::filesystem::exists(csv_path)) {
      for (const auto& r : read_metrics(csv_path)) {
        if (r.step < trainer.step()) kept_rows.push_back(format_metrics_row(r));
      }
    }
  }
  {
    std::string text = std::string(kMetricsHeader) + "\n";
    for (const auto& r : kept_rows) text += r + "\n";
    io::atomic_write(csv_path, text);
  }
  std::ofstream csv(csv_path, std::ios::app);

  const int64_t target = std::min(config.train.steps, options.stop_at.value_or(config.train.steps));
  while (trainer.step() < target) {
    MetricsRow row;
    try {
      row = trainer.run_step();
    } catch (const NonFiniteLoss&) {
      trainer.snapshot().write(run_dir / "diagnostic.gtkc");
      throw;
    }
    csv << format_metrics_row(row) << '\n';
    if (options.on_step) options.on_step(row);
    if (trainer.step() % config.train.checkpoint_every == 0 && trainer.step() < target) {
      csv.flush();
      trainer.snapshot().write(ckpt_path);
    }
  }
  csv.flush();
  trainer.snapshot().write(ckpt_path);

  TrainOutcome outcome;
  outcome.tokenizer = trainer.tokenizer();
  outcome.steps_done = trainer.step();
  outcome.final_usage = trainer.tokenizer()->codebook->observed() > 0
                            ? trainer.tokenizer()->codebook->usage(config.tokenizer.usage_window)
                            : 0.0;
  outcome.checkpoint = ckpt_path;
  return outcome;
}

LoadedTokenizer load_tokenizer(const std::filesystem::path& checkpoint_path) {
  if (!std::filesystem::exists(checkpoint_path)) {
    throw ValidationError("checkpoint_path", "checkpoint not found: " + checkpoint_path.string());
  }
  auto c = Checkpoint::read(checkpoint_path);
  LoadedTokenizer out;
  out.config = ExperimentConfig::from_doc(ConfigDoc::parse(c.config_text));
  out.tokenizer = net::Tokenizer(out.config.tokenizer);
  const auto* s = c.section("tokenizer");
  if (!s) throw ValidationError("checkpoint_missing", "checkpoint lacks section tokenizer");
  load_module_section(*s, *out.tokenizer);
  out.tokenizer->eval();
  out.step = c.step;
  return out;
}

}  // namespace vqtok::harness
