#include "ullm/config.hpp"

#include <filesystem>
#include <set>

#include <json.hpp>
#include <zlib.h>

#include "ullm/synthetic.hpp"

namespace ullm {

namespace {

using nlohmann::json;

[[noreturn]] void schema_error(const std::string& what) { throw Error(ErrorCode::schema, what); }

// Reads typed values from one JSON object and remembers which keys were
// used, so leftovers can be reported as unknown.
class Section {
 public:
  Section(const json* j, std::string path) : j_(j), path_(std::move(path)) {
    if (j_ && !j_->is_object()) schema_error("'" + path_ + "' must be an object");
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    if (!j_ || !j_->contains(key)) return fallback;
    try {
      return j_->at(key).get<T>();
    } catch (const json::exception&) {
      schema_error("'" + path_ + "." + key + "' has the wrong type (got " + j_->at(key).dump() + ")");
    }
  }

  template <typename T>
  std::optional<T> optional(const std::string& key) {
    used_.insert(key);
    if (!j_ || !j_->contains(key) || j_->at(key).is_null()) return std::nullopt;
    return get<T>(key, T{});
  }

  void finish() const {
    if (!j_) return;
    for (const auto& [key, value] : j_->items()) {
      if (!used_.count(key)) schema_error("unknown config key '" + path_ + "." + key + "'");
    }
  }

 private:
  const json* j_;
  std::string path_;
  std::set<std::string> used_;
};

const json* child(const json& root, const std::string& key) {
  return root.contains(key) ? &root.at(key) : nullptr;
}

void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) fail("override '" + assignment + "' must look like key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &root;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) fail("override '" + assignment + "' has an empty key segment");
    json* next;
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(key);
      } catch (const std::exception&) {
        fail("override '" + assignment + "': '" + key + "' is not an array index");
      }
      if (idx >= node->size()) fail("override '" + assignment + "': index " + key + " out of range");
      next = &(*node)[idx];
    } else {
      if (node->is_null()) *node = json::object();
      if (!node->is_object()) fail("override '" + assignment + "' descends into a non-object");
      next = &(*node)[key];
    }
    if (dot == std::string::npos) {
      *next = value;
      return;
    }
    node = next;
    start = dot + 1;
  }
}

std::string resolve(const std::string& base_dir, const std::string& p) {
  if (p.empty() || base_dir.empty() || std::filesystem::path(p).is_absolute()) return p;
  return (std::filesystem::path(base_dir) / p).lexically_normal().string();
}

template <typename F>
void as_schema(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::invalid_argument) schema_error(std::string("invalid config: ") + e.what());
    throw;
  }
}

json decoding_json(const DecodingConfig& d) {
  json j;
  j["strategy"] = std::string(to_string(d.strategy));
  j["seed"] = d.seed;
  switch (d.strategy) {
    case Strategy::beam:
      j["beam_size"] = d.beam_size;
      j["block_ngram"] = d.block_ngram ? json(*d.block_ngram) : json(nullptr);
      break;
    case Strategy::topk: j["top_k"] = d.top_k; break;
    case Strategy::nucleus: j["top_p"] = d.top_p; break;
    case Strategy::greedy: break;
  }
  return j;
}

json effective(const ExperimentConfig& c) {
  json j;
  auto& corpus = j["corpus"];
  if (c.source.synthetic_bytes) {
    corpus["synthetic_bytes"] = *c.source.synthetic_bytes;
    corpus["synthetic_seed"] = c.source.synthetic_seed;
  } else {
    corpus["train"] = c.source.train_path;
    corpus["valid"] = c.source.valid_path;
    corpus["test"] = c.source.test_path;
  }
  corpus["mode"] = std::string(to_string(c.corpus.mode));
  corpus["min_count"] = c.corpus.min_count;
  corpus["seq_len"] = c.corpus.seq_len;
  j["model"] = {{"n_layers", c.model.n_layers}, {"n_heads", c.model.n_heads}, {"d_model", c.model.d_model},
                {"d_ffn", c.model.d_ffn},       {"max_len", c.model.max_len}, {"seed", c.model.seed}};
  const auto& t = c.train;
  j["train"] = {{"objective", std::string(to_string(t.objective))},
                {"alpha", t.alpha},
                {"lr", t.lr},
                {"optimizer", std::string(to_string(t.optimizer))},
                {"max_updates", t.max_updates},
                {"eval_every", t.eval_every},
                {"batch_size", t.batch_size},
                {"clip_norm", t.clip_norm},
                {"seed", t.seed}};
  const auto& f = c.finetune;
  j["finetune"] = {{"mix_prob", f.mix_prob},
                   {"candidate_mode", std::string(to_string(f.candidate_mode))},
                   {"ngram", f.ngram},
                   {"p_penalize", f.p_penalize},
                   {"prefix_len", f.prefix_len},
                   {"continuation_len", f.continuation_len},
                   {"seq_batch_size", f.seq_batch_size},
                   {"base_objective", std::string(to_string(f.token.objective))},
                   {"max_updates", f.token.max_updates},
                   {"eval_every", f.token.eval_every},
                   {"lr", f.token.lr},
                   {"seed", f.token.seed}};
  j["decoding"] = json::array();
  for (const auto& d : c.decoding) j["decoding"].push_back(decoding_json(d));
  j["metrics"] = {{"prefix_len", c.metrics.prefix_len},     {"continuation_len", c.metrics.continuation_len},
                  {"max_prefixes", c.metrics.max_prefixes}, {"seq_rep_n", c.metrics.seq_rep_n},
                  {"rep_windows", c.metrics.rep_windows},   {"split", c.eval_split}};
  j["run"] = {{"out_dir", c.out_dir}, {"stamp", c.stamp}};
  return j;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text, const std::vector<std::string>& overrides,
                                         const std::string& source_path) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    schema_error(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) schema_error("config must be a JSON object");
  for (const auto& o : overrides) apply_override(root, o);

  ExperimentConfig c;
  c.source_path = source_path;
  const std::string base_dir =
      source_path.empty() ? std::string() : std::filesystem::path(source_path).parent_path().string();

  {
    Section top(&root, "");
    for (const char* k : {"corpus", "model", "train", "finetune", "decoding", "metrics", "run"}) top.optional<json>(k);
    top.finish();
  }

  Section corpus(child(root, "corpus"), "corpus");
  c.source.synthetic_bytes = corpus.optional<std::size_t>("synthetic_bytes");
  c.source.synthetic_seed = corpus.get<std::uint64_t>("synthetic_seed", 11);
  c.source.train_path = resolve(base_dir, corpus.get<std::string>("train", ""));
  c.source.valid_path = resolve(base_dir, corpus.get<std::string>("valid", ""));
  c.source.test_path = resolve(base_dir, corpus.get<std::string>("test", ""));
  const auto mode = corpus.get<std::string>("mode", "word");
  c.corpus.min_count = corpus.get<std::size_t>("min_count", 1);
  c.corpus.seq_len = corpus.get<std::size_t>("seq_len", 256);
  corpus.finish();

  Section model(child(root, "model"), "model");
  c.model.n_layers = model.get<std::size_t>("n_layers", c.model.n_layers);
  c.model.n_heads = model.get<std::size_t>("n_heads", c.model.n_heads);
  c.model.d_model = model.get<std::size_t>("d_model", c.model.d_model);
  c.model.d_ffn = model.get<std::size_t>("d_ffn", c.model.d_ffn);
  c.model.max_len = model.get<std::size_t>("max_len", c.corpus.seq_len);
  c.model.seed = model.get<std::uint64_t>("seed", c.model.seed);
  model.finish();

  Section train(child(root, "train"), "train");
  const auto objective = train.get<std::string>("objective", "mle");
  c.train.alpha = train.get<double>("alpha", c.train.alpha);
  c.train.lr = train.get<double>("lr", c.train.lr);
  const auto optimizer = train.get<std::string>("optimizer", "adam");
  c.train.max_updates = train.get<std::size_t>("max_updates", c.train.max_updates);
  c.train.eval_every = train.get<std::size_t>("eval_every", c.train.eval_every);
  c.train.batch_size = train.get<std::size_t>("batch_size", c.train.batch_size);
  c.train.clip_norm = train.get<double>("clip_norm", c.train.clip_norm);
  c.train.seed = train.get<std::uint64_t>("seed", c.train.seed);
  train.finish();

  Section ft(child(root, "finetune"), "finetune");
  c.finetune.mix_prob = ft.get<double>("mix_prob", c.finetune.mix_prob);
  const auto cand_mode = ft.get<std::string>("candidate_mode", "repeat-n");
  c.finetune.ngram = ft.get<std::size_t>("ngram", c.finetune.ngram);
  c.finetune.p_penalize = ft.get<double>("p_penalize", c.finetune.p_penalize);
  c.finetune.prefix_len = ft.get<std::size_t>("prefix_len", c.finetune.prefix_len);
  c.finetune.continuation_len = ft.get<std::size_t>("continuation_len", c.finetune.continuation_len);
  c.finetune.seq_batch_size = ft.get<std::size_t>("seq_batch_size", c.finetune.seq_batch_size);
  const auto base_objective = ft.optional<std::string>("base_objective");
  const auto ft_updates = ft.get<std::size_t>("max_updates", 1500);
  const auto ft_eval = ft.get<std::size_t>("eval_every", 500);
  const auto ft_lr = ft.optional<double>("lr");
  const auto ft_seed = ft.optional<std::uint64_t>("seed");
  ft.finish();

  Section metrics(child(root, "metrics"), "metrics");
  c.metrics.prefix_len = metrics.get<std::size_t>("prefix_len", c.metrics.prefix_len);
  c.metrics.continuation_len = metrics.get<std::size_t>("continuation_len", c.metrics.continuation_len);
  c.metrics.max_prefixes = metrics.get<std::size_t>("max_prefixes", c.metrics.max_prefixes);
  c.metrics.seq_rep_n = metrics.get<std::vector<std::size_t>>("seq_rep_n", c.metrics.seq_rep_n);
  c.metrics.rep_windows = metrics.get<std::vector<std::size_t>>("rep_windows", c.metrics.rep_windows);
  c.eval_split = metrics.get<std::string>("split", c.eval_split);
  metrics.finish();

  Section run(child(root, "run"), "run");
  c.out_dir = resolve(base_dir, run.get<std::string>("out_dir", "runs"));
  c.stamp = run.get<std::string>("stamp", "");
  run.finish();

  if (const json* dec = child(root, "decoding")) {
    if (!dec->is_array()) schema_error("'decoding' must be an array");
    for (std::size_t i = 0; i < dec->size(); ++i) {
      Section d(&(*dec)[i], "decoding." + std::to_string(i));
      DecodingConfig dc;
      const auto strategy = d.get<std::string>("strategy", "greedy");
      dc.beam_size = d.get<std::size_t>("beam_size", dc.beam_size);
      dc.block_ngram = d.optional<std::size_t>("block_ngram");
      dc.top_k = d.get<std::size_t>("top_k", dc.top_k);
      dc.top_p = d.get<double>("top_p", dc.top_p);
      dc.seed = d.get<std::uint64_t>("seed", dc.seed);
      d.finish();
      as_schema([&] { dc.strategy = parse_strategy(strategy); });
      c.decoding.push_back(dc);
    }
  } else {
    c.decoding.push_back(DecodingConfig{});
  }

  as_schema([&] {
    c.corpus.mode = parse_tokenizer_mode(mode);
    c.train.objective = parse_objective(objective);
    c.train.optimizer = parse_optimizer(optimizer);
    c.finetune.candidate_mode = parse_candidate_mode(cand_mode);
    c.finetune.token = c.train;
    if (base_objective) c.finetune.token.objective = parse_objective(*base_objective);
    c.finetune.token.max_updates = ft_updates;
    c.finetune.token.eval_every = ft_eval;
    if (ft_lr) c.finetune.token.lr = *ft_lr;
    if (ft_seed) c.finetune.token.seed = *ft_seed;
    for (auto& dc : c.decoding) {
      dc.max_new_tokens = c.metrics.continuation_len;
      dc.validate();
    }

    if (c.source.synthetic_bytes) {
      require(c.source.train_path.empty() && c.source.valid_path.empty() && c.source.test_path.empty(),
              "corpus: give either synthetic_bytes or train/valid/test paths, not both");
    } else {
      require(!c.source.train_path.empty() && !c.source.valid_path.empty() && !c.source.test_path.empty(),
              "corpus: train, valid and test paths are required");
    }
    require(c.corpus.seq_len >= 2, "corpus.seq_len must be at least 2");
    require(c.model.max_len + 1 >= c.corpus.seq_len, "model.max_len must be at least corpus.seq_len - 1");
    c.model.vocab_size = 1;  // placeholder until the corpus is loaded
    c.model.validate();
    c.model.vocab_size = 0;
    c.train.validate();
    c.finetune.validate(c.model.max_len);
    require(c.metrics.prefix_len >= 1 && c.metrics.continuation_len >= 1, "metrics lengths must be positive");
    require(c.metrics.prefix_len + c.metrics.continuation_len <= c.model.max_len,
            "metrics.prefix_len + continuation_len exceeds model.max_len");
    require(c.metrics.prefix_len + c.metrics.continuation_len <= c.corpus.seq_len,
            "metrics.prefix_len + continuation_len exceeds corpus.seq_len");
    require(!c.metrics.seq_rep_n.empty(), "metrics.seq_rep_n must not be empty");
    require(c.eval_split == "train" || c.eval_split == "valid" || c.eval_split == "test",
            "metrics.split must be train, valid or test");
  });

  c.effective_json = effective(c).dump(2) + "\n";
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path, const std::vector<std::string>& overrides) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::io, "config file not found: " + path);
  return parse_experiment_config(read_text_file(path), overrides, path);
}

PreparedCorpus load_corpus(ExperimentConfig& config) {
  PreparedCorpus corpus;
  if (config.source.synthetic_bytes) {
    const auto text = make_synthetic_corpus(*config.source.synthetic_bytes, config.source.synthetic_seed);
    corpus = prepare_corpus(text.train, text.valid, text.test, config.corpus);
  } else {
    for (const auto* p : {&config.source.train_path, &config.source.valid_path, &config.source.test_path}) {
      if (!std::filesystem::exists(*p)) throw Error(ErrorCode::io, "corpus file not found: " + *p);
    }
    corpus = prepare_corpus(read_text_file(config.source.train_path), read_text_file(config.source.valid_path),
                            read_text_file(config.source.test_path), config.corpus);
  }
  config.model.vocab_size = corpus.vocab.size();
  return corpus;
}

const std::vector<TokenSequence>& split_by_name(const PreparedCorpus& corpus, std::string_view name) {
  if (name == "train") return corpus.split.train;
  if (name == "valid") return corpus.split.valid;
  if (name == "test") return corpus.split.test;
  fail("unknown split '" + std::string(name) + "'");
}

std::string content_hash(std::string_view text) {
  const uLong crc = crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(text.data()),
                          static_cast<uInt>(text.size()));
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

}  // namespace ullm
