#include "vqtok/config.hpp"

#include "vqtok/binary_io.hpp"
#include "vqtok/errors.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

namespace vqtok::harness {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Drops `#` comments that sit outside double-quoted strings.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

std::string unquote(const std::string& raw) {
  const auto v = trim(raw);
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

std::vector<std::string> split_array(const std::string& where, const std::string& raw) {
  const auto v = trim(raw);
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') {
    throw ValidationError("value_type", where + " must be an array like [a, b]");
  }
  std::vector<std::string> items;
  std::string cur;
  bool quoted = false;
  for (char ch : v.substr(1, v.size() - 2)) {
    if (ch == '"') quoted = !quoted;
    if (ch == ',' && !quoted) {
      items.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!trim(cur).empty()) items.push_back(trim(cur));
  return items;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

/// Typed access to one section, remembering which keys were read so that
/// leftovers can be reported as unknown.
class SectionReader {
 public:
  SectionReader(const ConfigDoc& doc, std::string section) : doc_(doc), section_(std::move(section)) {}

  std::optional<std::string> raw(const std::string& key) {
    used_.insert(key);
    return doc_.get(section_, key);
  }

  std::string where(const std::string& key) const { return section_ + "." + key; }

  void read(const std::string& key, std::string& out) {
    if (auto v = raw(key)) out = unquote(*v);
  }

  void read(const std::string& key, int64_t& out) {
    if (auto v = raw(key)) out = parse_int(key, *v);
  }

  void read(const std::string& key, uint64_t& out) {
    if (auto v = raw(key)) {
      const auto n = parse_int(key, *v);
      if (n < 0) throw ValidationError("value_range", where(key) + " must be non-negative");
      out = static_cast<uint64_t>(n);
    }
  }

  void read(const std::string& key, double& out) {
    if (auto v = raw(key)) out = parse_double(key, *v);
  }

  void read(const std::string& key, bool& out) {
    if (auto v = raw(key)) {
      const auto t = trim(*v);
      if (t != "true" && t != "false") throw ValidationError("value_type", where(key) + " must be true or false");
      out = t == "true";
    }
  }

  int64_t parse_int(const std::string& key, const std::string& raw_value) const {
    const auto t = trim(raw_value);
    int64_t n = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), n);
    if (ec != std::errc() || ptr != t.data() + t.size()) {
      throw ValidationError("value_type", where(key) + " must be an integer, got '" + t + "'");
    }
    return n;
  }

  double parse_double(const std::string& key, const std::string& raw_value) const {
    const auto t = trim(raw_value);
    char* end = nullptr;
    const double d = std::strtod(t.c_str(), &end);
    if (t.empty() || end != t.c_str() + t.size() || !std::isfinite(d)) {
      throw ValidationError("value_type", where(key) + " must be a finite number, got '" + t + "'");
    }
    return d;
  }

  void finish() const {
    auto it = doc_.sections.find(section_);
    if (it == doc_.sections.end()) return;
    for (const auto& [key, value] : it->second) {
      if (!used_.count(key)) throw ValidationError("unknown_key", "unknown key '" + where(key) + "'");
    }
  }

 private:
  const ConfigDoc& doc_;
  std::string section_;
  std::set<std::string> used_;
};

vq::GradMode parse_grad_mode(const std::string& text) {
  if (text == "straight_through") return vq::GradMode::straight_through;
  if (text == "rotation_trick") return vq::GradMode::rotation_trick;
  throw ValidationError("grad_mode", "grad_mode must be straight_through or rotation_trick, got '" + text + "'");
}

std::string to_string(vq::GradMode mode) {
  return mode == vq::GradMode::straight_through ? "straight_through" : "rotation_trick";
}

int64_t split_size(int64_t n, double ratio) { return static_cast<int64_t>(std::llround(ratio * static_cast<double>(n))); }

}  // namespace

ConfigDoc ConfigDoc::parse(const std::string& text) {
  std::istringstream in(text);
  std::ostringstream cleaned;
  std::string line;
  while (std::getline(in, line)) cleaned << strip_comment(line) << '\n';
  boost::property_tree::ptree tree;
  std::istringstream ini(cleaned.str());
  try {
    boost::property_tree::ini_parser::read_ini(ini, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ValidationError("config_syntax", e.message() + " at line " + std::to_string(e.line()));
  }
  ConfigDoc doc;
  for (const auto& [name, node] : tree) {
    if (node.empty() && !node.data().empty()) throw ValidationError("config_syntax", "key '" + name + "' appears outside a section");
    auto& section = doc.sections[name];
    for (const auto& [key, value] : node) section[key] = trim(value.data());
  }
  return doc;
}

ConfigDoc ConfigDoc::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("config_path", "config file not found: " + path.string());
  return parse(io::read_file(path));
}

void ConfigDoc::set(const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos) throw ValidationError("config_syntax", "override key needs section.key form");
  sections[dotted_key.substr(0, dot)][dotted_key.substr(dot + 1)] = value;
}

std::optional<std::string> ConfigDoc::get(const std::string& section, const std::string& key) const {
  auto s = sections.find(section);
  if (s == sections.end()) return std::nullopt;
  auto k = s->second.find(key);
  if (k == s->second.end()) return std::nullopt;
  return k->second;
}

CorpusKind parse_corpus_kind(const std::string& text) {
  if (text == "synthetic_shapes") return CorpusKind::synthetic_shapes;
  if (text == "image_folder") return CorpusKind::image_folder;
  throw ValidationError("corpus_kind", "data.kind must be synthetic_shapes or image_folder, got '" + text + "'");
}

std::string to_string(CorpusKind kind) {
  return kind == CorpusKind::synthetic_shapes ? "synthetic_shapes" : "image_folder";
}

void CorpusSpec::validate() const {
  if (split.size() != 3) throw ValidationError("split_ratios", "data.split needs three ratios");
  double sum = 0.0;
  for (double r : split) {
    if (r < 0.0) throw ValidationError("split_ratios", "split ratios must be non-negative");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("split_ratios", "split ratios must sum to 1");
  if (num_classes < 2) throw ValidationError("num_classes", "need at least 2 classes");
  if (kind == CorpusKind::synthetic_shapes) {
    if (num_classes > 16) throw ValidationError("num_classes", "synthetic_shapes supports at most 16 classes");
    if (count < num_classes) throw ValidationError("corpus_count", "data.count must cover every class");
    for (double r : split) {
      if (split_size(count, r) < 1) throw ValidationError("split_ratios", "every split must receive samples");
    }
  } else if (folder.empty()) {
    throw ValidationError("corpus_folder", "image_folder corpus needs data.folder");
  }
}

void TrainSettings::validate() const {
  if (steps < 1) throw ValidationError("train_steps", "train.steps must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size", "train.batch_size must be >= 1");
  if (checkpoint_every < 1) throw ValidationError("checkpoint_every", "train.checkpoint_every must be >= 1");
  if (disc_start_fraction < 0.0 || disc_start_fraction > 1.0) {
    throw ValidationError("disc_start", "train.disc_start must lie in [0, 1]");
  }
  if (!(posterior_temperature > 0.0)) throw ValidationError("temperature", "posterior temperature must be > 0");
}

double default_entropy_weight(const net::TokenizerConfig& tokenizer) {
  const auto largest = net::TierName::L;
  return tokenizer.encoder_tier == largest || tokenizer.decoder_tier == largest ? kLargestTierEntropyWeight : 0.0;
}

int64_t default_align_layer(const net::TokenizerConfig& tokenizer) {
  return std::min<int64_t>(3, net::size_tier(tokenizer.decoder_tier).blocks);
}

ExperimentConfig ExperimentConfig::from_doc(const ConfigDoc& doc) {
  static const std::set<std::string> known = {"run",      "tokenizer", "losses", "schedule", "train",
                                              "sem_reg",  "data",      "ar",     "probe",    "sweep"};
  for (const auto& [name, keys] : doc.sections) {
    if (!known.count(name)) throw ValidationError("unknown_section", "unknown section [" + name + "]");
  }
  ExperimentConfig c;

  SectionReader run(doc, "run");
  run.read("name", c.name);
  run.read("seed", c.seed);
  run.read("output_dir", c.output_dir);
  run.finish();

  SectionReader tok(doc, "tokenizer");
  if (auto v = tok.raw("latent")) c.tokenizer.latent_kind = net::parse_latent_kind(unquote(*v));
  tok.read("image_size", c.tokenizer.image_size);
  tok.read("downsample", c.tokenizer.downsample);
  tok.read("tokens", c.tokenizer.token_count);
  if (auto v = tok.raw("encoder")) c.tokenizer.encoder_tier = net::parse_tier(unquote(*v));
  if (auto v = tok.raw("decoder")) c.tokenizer.decoder_tier = net::parse_tier(unquote(*v));
  tok.read("codebook_size", c.tokenizer.codebook_size);
  tok.read("code_dim", c.tokenizer.code_dim);
  if (auto v = tok.raw("grad_mode")) c.tokenizer.grad_mode = parse_grad_mode(unquote(*v));
  tok.read("usage_window", c.tokenizer.usage_window);
  tok.read("allow_encoder_larger", c.tokenizer.allow_encoder_larger);
  tok.finish();

  SectionReader losses(doc, "losses");
  losses.read("perceptual", c.losses.perceptual);
  losses.read("gan", c.losses.gan);
  losses.read("vq", c.losses.vq);
  losses.read("commitment", c.losses.commitment);
  if (auto v = losses.raw("entropy"); v && unquote(*v) != "auto") {
    c.losses.entropy = losses.parse_double("entropy", *v);
    c.entropy_auto = false;
  }
  losses.finish();
  if (c.entropy_auto) c.losses.entropy = default_entropy_weight(c.tokenizer);

  SectionReader train(doc, "train");
  train.read("steps", c.train.steps);
  train.read("batch_size", c.train.batch_size);
  train.read("checkpoint_every", c.train.checkpoint_every);
  train.read("disc_start", c.train.disc_start_fraction);
  train.read("posterior_temperature", c.train.posterior_temperature);
  train.read("steps_per_epoch", c.train.steps_per_epoch);
  train.finish();

  SectionReader data(doc, "data");
  if (auto v = data.raw("kind")) c.data.kind = parse_corpus_kind(unquote(*v));
  data.read("folder", c.data.folder);
  data.read("classes", c.data.num_classes);
  data.read("count", c.data.count);
  if (auto v = data.raw("split")) {
    c.data.split.clear();
    for (const auto& item : split_array("data.split", *v)) c.data.split.push_back(data.parse_double("split", item));
  }
  data.read("seed", c.data.seed);
  data.finish();
  c.data.image_size = c.tokenizer.image_size;

  SectionReader sched(doc, "schedule");
  if (auto v = sched.raw("kind")) c.schedule.kind = objectives::parse_schedule_kind(unquote(*v));
  sched.read("base_lr", c.schedule.base_lr);
  sched.read("min_lr", c.schedule.min_lr);
  sched.read("warmup_epochs", c.schedule.warmup_epochs);
  sched.read("decay_ratio", c.schedule.decay_ratio);
  sched.finish();
  c.schedule.total_steps = c.train.steps;
  if (c.train.steps_per_epoch > 0) {
    c.schedule.steps_per_epoch = c.train.steps_per_epoch;
  } else if (c.data.kind == CorpusKind::synthetic_shapes && !c.data.split.empty()) {
    const int64_t n_train = split_size(c.data.count, c.data.split[0]);
    c.schedule.steps_per_epoch = std::max<int64_t>(1, (n_train + c.train.batch_size - 1) / std::max<int64_t>(1, c.train.batch_size));
  }

  SectionReader sem(doc, "sem_reg");
  sem.read("lambda", c.sem_reg.lambda);
  c.sem_reg.align_layer = default_align_layer(c.tokenizer);
  if (auto v = sem.raw("align_layer"); v && unquote(*v) != "auto") {
    c.sem_reg.align_layer = sem.parse_int("align_layer", *v);
  }
  if (auto v = sem.raw("teacher")) c.sem_reg.teacher = semantic::parse_teacher_source(unquote(*v));
  sem.read("teacher_channels", c.sem_reg.teacher_channels);
  sem.read("teacher_seed", c.sem_reg.teacher_seed);
  sem.read("archive", c.sem_reg.archive_path);
  sem.finish();
  c.losses.sem_reg = c.sem_reg.lambda;

  SectionReader ar(doc, "ar");
  ar.read("blocks", c.ar.blocks);
  ar.read("heads", c.ar.heads);
  ar.read("width", c.ar.width);
  ar.read("label_dropout", c.ar.label_dropout);
  ar.finish();
  c.ar.vocab = c.tokenizer.codebook_size;
  c.ar.token_count = c.tokenizer.tokens();
  c.ar.num_classes = c.data.num_classes;

  SectionReader pr(doc, "probe");
  pr.read("epochs", c.probe.epochs);
  pr.read("batch_size", c.probe.batch_size);
  if (auto v = pr.raw("schedule")) c.probe.schedule.kind = objectives::parse_schedule_kind(unquote(*v));
  pr.read("base_lr", c.probe.schedule.base_lr);
  pr.read("min_lr", c.probe.schedule.min_lr);
  pr.read("warmup_epochs", c.probe.schedule.warmup_epochs);
  pr.read("decay_ratio", c.probe.schedule.decay_ratio);
  pr.read("weight_decay", c.probe.weight_decay);
  pr.read("samples", c.probe.generated_samples);
  pr.read("guidance_scale", c.probe.guidance_scale);
  pr.read("unguided_fraction", c.probe.unguided_fraction);
  pr.finish();

  SectionReader sw(doc, "sweep");
  if (auto v = sw.raw("tiers")) {
    for (const auto& item : split_array("sweep.tiers", *v)) c.sweep.tiers.push_back(unquote(item));
  }
  if (auto v = sw.raw("lambdas")) {
    for (const auto& item : split_array("sweep.lambdas", *v)) c.sweep.lambdas.push_back(sw.parse_double("lambdas", item));
  }
  if (auto v = sw.raw("seeds")) {
    for (const auto& item : split_array("sweep.seeds", *v)) {
      const auto n = sw.parse_int("seeds", item);
      if (n < 0) throw ValidationError("value_range", "sweep.seeds must be non-negative");
      c.sweep.seeds.push_back(static_cast<uint64_t>(n));
    }
  }
  sw.finish();

  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) { return from_doc(ConfigDoc::load(path)); }

void ExperimentConfig::validate() const {
  if (name.empty() || name.find('/') != std::string::npos) {
    throw ValidationError("run_name", "run.name must be non-empty and contain no '/'");
  }
  tokenizer.validate();
  if (tokenizer.usage_window < 1) throw ValidationError("usage_window", "usage_window must be >= 1");
  for (const auto& [key, w] : losses.as_map()) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw ValidationError("loss_weight", "loss weight '" + key + "' must be finite and >= 0");
    }
  }
  train.validate();
  schedule.validate();
  if (sem_reg.lambda > 0.0) sem_reg.validate(net::size_tier(tokenizer.decoder_tier).blocks);
  else if (sem_reg.lambda < 0.0) throw ValidationError("sem_lambda", "lambda must be >= 0");
  data.validate();
  ar.validate();
  if (probe.epochs < 1 || probe.batch_size < 1) {
    throw ValidationError("probe_budget", "probe.epochs and probe.batch_size must be >= 1");
  }
  if (probe.generated_samples < 2) throw ValidationError("probe_samples", "probe.samples must be >= 2");
  if (!(probe.schedule.min_lr > 0.0 && probe.schedule.min_lr <= probe.schedule.base_lr)) {
    throw ValidationError("lr_order", "probe needs 0 < min_lr <= base_lr");
  }
  if (!(probe.schedule.decay_ratio > 0.0 && probe.schedule.decay_ratio < 1.0)) {
    throw ValidationError("decay_ratio", "probe.decay_ratio must lie in (0, 1)");
  }
  probe::CFGSchedule{probe.guidance_scale, probe.unguided_fraction}.validate();
  for (const auto& pair : sweep.tiers) {
    const auto dash = pair.find('-');
    if (dash == std::string::npos) throw ValidationError("sweep_tiers", "sweep tier '" + pair + "' must be ENC-DEC");
    net::parse_tier(pair.substr(0, dash));
    net::parse_tier(pair.substr(dash + 1));
  }
  for (double l : sweep.lambdas) {
    if (l < 0.0) throw ValidationError("sem_lambda", "sweep lambdas must be >= 0");
  }
}

std::string ExperimentConfig::canonical_text() const {
  std::ostringstream o;
  auto str = [](const std::string& s) { return "\"" + s + "\""; };
  auto dbl_list = [&](const std::vector<double>& v) {
    std::string s = "[";
    for (size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + format_double(v[i]);
    return s + "]";
  };
  o << "[run]\nname = " << str(name) << "\nseed = " << seed << "\n\n";
  o << "[tokenizer]\nlatent = " << str(net::to_string(tokenizer.latent_kind)) << "\nimage_size = " << tokenizer.image_size
    << "\ndownsample = " << tokenizer.downsample << "\ntokens = " << tokenizer.tokens()
    << "\nencoder = " << str(net::to_string(tokenizer.encoder_tier))
    << "\ndecoder = " << str(net::to_string(tokenizer.decoder_tier)) << "\ncodebook_size = " << tokenizer.codebook_size
    << "\ncode_dim = " << tokenizer.code_dim << "\ngrad_mode = " << str(to_string(tokenizer.grad_mode))
    << "\nusage_window = " << tokenizer.usage_window
    << "\nallow_encoder_larger = " << (tokenizer.allow_encoder_larger ? "true" : "false") << "\n\n";
  o << "[losses]\nperceptual = " << format_double(losses.perceptual) << "\ngan = " << format_double(losses.gan)
    << "\nvq = " << format_double(losses.vq) << "\ncommitment = " << format_double(losses.commitment)
    << "\nentropy = " << format_double(losses.entropy) << "\n\n";
  o << "[schedule]\nkind = " << str(objectives::to_string(schedule.kind)) << "\nbase_lr = " << format_double(schedule.base_lr)
    << "\nmin_lr = " << format_double(schedule.min_lr) << "\nwarmup_epochs = " << format_double(schedule.warmup_epochs)
    << "\ndecay_ratio = " << format_double(schedule.decay_ratio) << "\n\n";
  o << "[train]\nsteps = " << train.steps << "\nbatch_size = " << train.batch_size
    << "\ncheckpoint_every = " << train.checkpoint_every << "\ndisc_start = " << format_double(train.disc_start_fraction)
    << "\nposterior_temperature = " << format_double(train.posterior_temperature)
    << "\nsteps_per_epoch = " << schedule.steps_per_epoch << "\n\n";
  o << "[sem_reg]\nlambda = " << format_double(sem_reg.lambda) << "\nalign_layer = " << sem_reg.align_layer
    << "\nteacher = " << str(semantic::to_string(sem_reg.teacher)) << "\nteacher_channels = " << sem_reg.teacher_channels
    << "\nteacher_seed = " << sem_reg.teacher_seed << "\narchive = " << str(sem_reg.archive_path) << "\n\n";
  o << "[data]\nkind = " << str(to_string(data.kind)) << "\nfolder = " << str(data.folder)
    << "\nclasses = " << data.num_classes << "\ncount = " << data.count << "\nsplit = " << dbl_list(data.split)
    << "\nseed = " << data.seed << "\n\n";
  o << "[ar]\nblocks = " << ar.blocks << "\nheads = " << ar.heads << "\nwidth = " << ar.width
    << "\nlabel_dropout = " << format_double(ar.label_dropout) << "\n\n";
  o << "[probe]\nepochs = " << probe.epochs << "\nbatch_size = " << probe.batch_size
    << "\nschedule = " << str(objectives::to_string(probe.schedule.kind))
    << "\nbase_lr = " << format_double(probe.schedule.base_lr) << "\nmin_lr = " << format_double(probe.schedule.min_lr)
    << "\nwarmup_epochs = " << format_double(probe.schedule.warmup_epochs)
    << "\ndecay_ratio = " << format_double(probe.schedule.decay_ratio)
    << "\nweight_decay = " << format_double(probe.weight_decay) << "\nsamples = " << probe.generated_samples
    << "\nguidance_scale = " << format_double(probe.guidance_scale)
    << "\nunguided_fraction = " << format_double(probe.unguided_fraction) << "\n";
  if (!sweep.empty()) {
    o << "\n[sweep]\n";
    if (!sweep.tiers.empty()) {
      o << "tiers = [";
      for (size_t i = 0; i < sweep.tiers.size(); ++i) o << (i ? ", " : "") << str(sweep.tiers[i]);
      o << "]\n";
    }
    if (!sweep.lambdas.empty()) o << "lambdas = " << dbl_list(sweep.lambdas) << "\n";
    if (!sweep.seeds.empty()) {
      o << "seeds = [";
      for (size_t i = 0; i < sweep.seeds.size(); ++i) o << (i ? ", " : "") << sweep.seeds[i];
      o << "]\n";
    }
  }
  return o.str();
}

uint64_t ExperimentConfig::digest() const { return io::fnv1a(canonical_text()); }

}  // namespace vqtok::harness
