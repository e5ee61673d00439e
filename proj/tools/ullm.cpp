// Command-line front end: train, finetune, generate, eval, gradcheck, report.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ullm/config.hpp"
#include "ullm/decoding.hpp"
#include "ullm/gradcheck.hpp"
#include "ullm/language_model.hpp"
#include "ullm/metrics.hpp"
#include "ullm/model.hpp"
#include "ullm/synthetic.hpp"
#include "ullm/training.hpp"

namespace fs = std::filesystem;
using namespace ullm;

namespace {

enum Exit : int {
  kOk = 0,
  kOther = 1,
  kUsage = 2,
  kIo = 3,
  kSchema = 4,
  kNumeric = 5,
  kGradcheckFailed = 6,
  kFormat = 7,
};

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out;
}

int report_error(std::string_view code, int exit_code, const std::string& message) {
  std::cerr << "error: code=" << code << " message=\"" << escape(message) << "\"\n";
  return exit_code;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out << content;
  if (!out) throw Error(ErrorCode::io, "failed writing " + path.string());
}

fs::path make_run_dir(const ExperimentConfig& cfg, const std::string& command, const std::string& extra) {
  std::string name = command + "-" + content_hash(command + "\n" + cfg.effective_json + extra);
  if (!cfg.stamp.empty()) name += "-" + cfg.stamp;
  const fs::path dir = fs::path(cfg.out_dir) / name;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::io, "cannot create run directory " + dir.string() + ": " + ec.message());
  write_file(dir / "config.json", cfg.effective_json);
  return dir;
}

Parameters<float> load_matching_checkpoint(const std::string& path, const ExperimentConfig& cfg) {
  if (!fs::exists(path)) throw Error(ErrorCode::io, "checkpoint not found: " + path);
  Parameters<float> p = load_checkpoint(path);
  require(p.config.vocab_size == cfg.model.vocab_size,
          "checkpoint vocabulary (" + std::to_string(p.config.vocab_size) + ") does not match corpus vocabulary (" +
              std::to_string(cfg.model.vocab_size) + ")");
  return p;
}

std::string file_hash(const std::string& path) { return content_hash(read_text_file(path)); }

void save_series(const fs::path& dir, const std::vector<Checkpoint>& series) {
  fs::create_directories(dir / "checkpoints");
  std::ostringstream index;
  index << "update\tvalid_ppl\tobjective\tconfig_hash\tfile\n";
  for (const auto& c : series) {
    std::ostringstream name;
    name << "ckpt_" << std::setw(7) << std::setfill('0') << c.meta.update_count << ".bin";
    save_checkpoint((dir / "checkpoints" / name.str()).string(), c.params);
    index << c.meta.update_count << '\t' << std::setprecision(17) << c.meta.valid_ppl << '\t' << c.meta.objective
          << '\t' << c.meta.config_hash << '\t' << name.str() << '\n';
  }
  write_file(dir / "checkpoints.tsv", index.str());
}

int cmd_train(const Common& common) {
  ExperimentConfig cfg = load_experiment_config(common.config_path, common.sets);
  PreparedCorpus corpus = load_corpus(cfg);
  const fs::path dir = make_run_dir(cfg, "train", "");
  corpus.vocab.save((dir / "vocab.txt").string());
  cfg.train.config_hash = content_hash(cfg.effective_json);
  std::ofstream log(dir / "train_log.jsonl");
  const TrainResult result =
      train_token_level(cfg.train, init_parameters<float>(cfg.model), corpus.split, {&log, dir.string()});
  save_series(dir, result.series);
  save_checkpoint((dir / "best.bin").string(), select_best_checkpoint(result.series));
  std::cout << dir.string() << '\n';
  return kOk;
}

int cmd_finetune(const Common& common, const std::string& base_path) {
  ExperimentConfig cfg = load_experiment_config(common.config_path, common.sets);
  PreparedCorpus corpus = load_corpus(cfg);
  const Parameters<float> base = load_matching_checkpoint(base_path, cfg);
  const fs::path dir = make_run_dir(cfg, "finetune", file_hash(base_path));
  corpus.vocab.save((dir / "vocab.txt").string());
  cfg.finetune.token.config_hash = content_hash(cfg.effective_json);
  std::ofstream log(dir / "finetune_log.jsonl");
  const TrainResult result = finetune_sequence_level(cfg.finetune, base, corpus.split, {&log, dir.string()});
  save_series(dir, result.series);
  save_checkpoint((dir / "final.bin").string(), result.series.back().params);
  save_checkpoint((dir / "best.bin").string(), select_best_checkpoint(result.series));
  const auto& k = result.counters;
  nlohmann::ordered_json counters = {{"token_updates", k.token_updates},
                                     {"sequence_updates", k.sequence_updates},
                                     {"prefix_tokens_read", k.prefix_tokens_read},
                                     {"decoded_tokens", k.decoded_tokens},
                                     {"flagged_tokens", k.flagged_tokens},
                                     {"sequence_batches_without_candidates", k.blocked_sequence_batches}};
  write_file(dir / "counters.json", counters.dump(2) + "\n");
  std::cout << dir.string() << '\n';
  return kOk;
}

struct DecodingFlags {
  std::string strategy;
  std::size_t beam_size = 1;
  std::size_t block_ngram = 0;
  std::size_t top_k = 1;
  double top_p = 1.0;
  std::uint64_t seed = 0;

  std::vector<DecodingConfig> resolve(const ExperimentConfig& cfg) const {
    if (strategy.empty()) return cfg.decoding;
    DecodingConfig d;
    d.strategy = parse_strategy(strategy);
    d.beam_size = beam_size;
    if (block_ngram) d.block_ngram = block_ngram;
    d.top_k = top_k;
    d.top_p = top_p;
    d.seed = seed;
    d.max_new_tokens = cfg.metrics.continuation_len;
    d.validate();
    return {d};
  }

  std::string describe() const {
    std::ostringstream ss;
    ss << strategy << ' ' << beam_size << ' ' << block_ngram << ' ' << top_k << ' ' << std::setprecision(17) << top_p
       << ' ' << seed;
    return ss.str();
  }
};

void add_decoding_flags(CLI::App* app, DecodingFlags& f) {
  app->add_option("--strategy", f.strategy, "greedy | beam | topk | nucleus (default: config decoding list)");
  app->add_option("--beam-size", f.beam_size, "Beam width");
  app->add_option("--block-ngram", f.block_ngram, "Block repeated n-grams in beam search (0 = off)");
  app->add_option("--top-k", f.top_k, "k for top-k sampling");
  app->add_option("--top-p", f.top_p, "p for nucleus sampling");
  app->add_option("--seed", f.seed, "Sampling seed");
}

int cmd_generate(const Common& common, const std::string& ckpt, const std::string& prefix_text,
                 const DecodingFlags& flags) {
  ExperimentConfig cfg = load_experiment_config(common.config_path, common.sets);
  PreparedCorpus corpus = load_corpus(cfg);
  const Parameters<float> params = load_matching_checkpoint(ckpt, cfg);
  const auto decodings = flags.resolve(cfg);
  const fs::path dir =
      make_run_dir(cfg, "generate", file_hash(ckpt) + "\n" + prefix_text + "\n" + flags.describe());
  std::vector<std::vector<TokenId>> prefixes;
  if (!prefix_text.empty()) {
    prefixes.push_back(encode(prefix_text, corpus.vocab));
    require(!prefixes.back().empty(), "prefix text has no tokens");
  } else {
    for (auto& [p, truth] : completion_pairs(split_by_name(corpus, cfg.eval_split), cfg.metrics.prefix_len,
                                             cfg.metrics.continuation_len, cfg.metrics.max_prefixes)) {
      prefixes.push_back(std::move(p));
    }
  }
  const TransformerLM<float> model(params);
  std::ostringstream tsv, text;
  for (const auto& dc : decodings) {
    Rng rng(dc.seed);
    for (const auto& prefix : prefixes) {
      const DecodeResult r = decode(model, prefix, dc, rng);
      write_completion(tsv, {dc.tag(), r.score, prefix, r.continuation});
      text << '[' << dc.tag() << "] " << decode(prefix, corpus.vocab) << " || " << decode(r.continuation, corpus.vocab)
           << '\n';
    }
  }
  write_file(dir / "completions.tsv", tsv.str());
  write_file(dir / "completions.txt", text.str());
  std::cout << text.str();
  std::cout << dir.string() << '\n';
  return kOk;
}

std::string safe_tag(std::string tag) {
  for (char& c : tag) {
    if (c == '/' || c == ' ') c = '_';
  }
  return tag;
}

int cmd_eval(const Common& common, const std::string& ckpt, const std::string& split_override,
             const std::string& model_name, const DecodingFlags& flags) {
  ExperimentConfig cfg = load_experiment_config(common.config_path, common.sets);
  if (!split_override.empty()) {
    require(split_override == "train" || split_override == "valid" || split_override == "test",
            "--split must be train, valid or test");
    cfg.eval_split = split_override;
  }
  PreparedCorpus corpus = load_corpus(cfg);
  const Parameters<float> params = load_matching_checkpoint(ckpt, cfg);
  const auto decodings = flags.resolve(cfg);
  CompletionSuite suite = cfg.metrics;
  suite.model_name = model_name.empty() ? fs::path(ckpt).stem().string() : model_name;
  const fs::path dir = make_run_dir(cfg, "eval",
                                    file_hash(ckpt) + "\n" + cfg.eval_split + "\n" + suite.model_name + "\n" +
                                        flags.describe());
  const TransformerLM<float> model(params);
  const SuiteResult result = evaluate_completion_suite(model, split_by_name(corpus, cfg.eval_split), suite, decodings);
  std::ostringstream tsv;
  for (std::size_t i = 0; i < result.reports.size(); ++i) {
    const auto& rep = result.reports[i];
    const std::string tag = safe_tag(rep.search);
    write_file(dir / ("metrics-" + tag + ".json"), rep.to_json());
    export_histogram_csv(rep.token_histogram, corpus.vocab, (dir / ("histogram-" + tag + ".csv")).string());
    for (const auto& rec : result.completions[i]) write_completion(tsv, rec);
    std::cout << (dir / ("metrics-" + tag + ".json")).string() << '\n';
  }
  write_file(dir / "human.json", result.human.to_json());
  export_histogram_csv(result.human.token_histogram, corpus.vocab, (dir / "histogram-human.csv").string());
  write_file(dir / "completions.tsv", tsv.str());
  std::cout << (dir / "human.json").string() << '\n';
  return kOk;
}

int cmd_gradcheck(const std::vector<std::size_t>& vocab, std::size_t trials, std::uint64_t seed, double tolerance,
                  bool model_check, std::size_t samples, double model_tolerance) {
  const ObjectiveCheckResult r = check_objective_gradients(vocab, trials, seed);
  bool ok = r.max_error() <= tolerance;
  std::ostringstream ss;
  ss << std::setprecision(3);
  ss << (ok ? "PASS" : "FAIL") << " max_rel_err " << (ok ? "< " : ">= ") << tolerance << " (trials=" << trials
     << " single_fd=" << r.single_vs_fd << " single_engine=" << r.single_vs_engine << " multi_fd=" << r.multi_vs_fd
     << " multi_engine=" << r.multi_vs_engine << ")\n";
  if (model_check) {
    ModelConfig mc;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.d_model = 16;
    mc.d_ffn = 32;
    mc.vocab_size = 11;
    mc.max_len = 16;
    mc.seed = seed;
    const ModelCheckResult m = check_model_gradients(mc, samples, 1.0, seed);
    const bool mok = m.mle_max_rel_err <= model_tolerance && m.ul_max_rel_err <= model_tolerance;
    ss << (mok ? "PASS" : "FAIL") << " model max_rel_err " << (mok ? "< " : ">= ") << model_tolerance
       << " (samples=" << samples << " mle=" << m.mle_max_rel_err << " ul_token=" << m.ul_max_rel_err << ")\n";
    ok = ok && mok;
  }
  std::cout << ss.str();
  return ok ? kOk : kGradcheckFailed;
}

std::string format_cell(const std::optional<double>& v, int precision) {
  if (!v) return "-";
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(precision) << *v;
  return ss.str();
}

int cmd_report(const std::vector<std::string>& files, const std::string& csv_path) {
  std::vector<MetricsReport> reports;
  std::set<std::size_t> ns, ls;
  for (const auto& f : files) {
    if (!fs::exists(f)) throw Error(ErrorCode::io, "report not found: " + f);
    reports.push_back(MetricsReport::from_json(read_text_file(f)));
    for (const auto& [n, v] : reports.back().seq_rep) ns.insert(n);
    for (const auto& [l, v] : reports.back().rep) ls.insert(l);
  }
  std::vector<std::string> header = {"model", "search"};
  for (auto n : ns) header.push_back("seq-rep-" + std::to_string(n));
  for (const char* h : {"uniq-seq", "ppl", "acc"}) header.push_back(h);
  for (auto l : ls) header.push_back("rep/" + std::to_string(l));
  for (auto l : ls) header.push_back("wrep/" + std::to_string(l));
  header.push_back("uniq");

  std::vector<std::vector<std::string>> rows;
  for (const auto& r : reports) {
    std::vector<std::string> row = {r.model, r.search};
    auto lookup = [](const std::map<std::size_t, double>& m, std::size_t k) -> std::optional<double> {
      const auto it = m.find(k);
      if (it == m.end()) return std::nullopt;
      return it->second;
    };
    for (auto n : ns) row.push_back(format_cell(lookup(r.seq_rep, n), 3));
    row.push_back(r.uniq_seq ? std::to_string(*r.uniq_seq) : "-");
    row.push_back(format_cell(r.ppl, 2));
    row.push_back(format_cell(r.acc, 3));
    for (auto l : ls) row.push_back(format_cell(lookup(r.rep, l), 3));
    for (auto l : ls) row.push_back(format_cell(lookup(r.wrep, l), 3));
    row.push_back(r.uniq ? std::to_string(*r.uniq) : "-");
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& row : rows) width[c] = std::max(width[c], row[c].size());
  }
  auto print_row = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      std::cout << (c ? "  " : "") << std::setw(static_cast<int>(width[c])) << (c < 2 ? std::left : std::right)
                << row[c];
    }
    std::cout << '\n';
  };
  print_row(header);
  for (const auto& row : rows) print_row(row);
  if (!csv_path.empty()) {
    std::ostringstream csv;
    auto csv_row = [&](const std::vector<std::string>& row) {
      for (std::size_t c = 0; c < row.size(); ++c) csv << (c ? "," : "") << row[c];
      csv << '\n';
    };
    csv_row(header);
    for (const auto& row : rows) csv_row(row);
    write_file(csv_path, csv.str());
  }
  return kOk;
}

int cmd_make_corpus(std::size_t bytes, std::uint64_t seed, const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Error(ErrorCode::io, "cannot create " + out + ": " + ec.message());
  const SyntheticCorpus corpus = make_synthetic_corpus(bytes, seed);
  write_file(fs::path(out) / "train.txt", corpus.train);
  write_file(fs::path(out) / "valid.txt", corpus.valid);
  write_file(fs::path(out) / "test.txt", corpus.test);
  std::cout << out << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unlikelihood training lab: train, fine-tune, decode and evaluate small language models."};
  app.require_subcommand(1);
  app.footer(
      "Exit codes: 0 ok, 1 unexpected, 2 usage or invalid argument, 3 missing file or I/O, 4 config schema, "
      "5 non-finite loss, 6 gradient check failed, 7 corrupt file.");

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "Experiment config (JSON)")->required();
    sub->add_option("--set", common.sets, "Override a config value, e.g. --set train.lr=0.0005");
  };

  auto* train = app.add_subcommand("train", "Token-level training (MLE or UL-token)");
  add_common(train);

  std::string base;
  auto* finetune = app.add_subcommand("finetune", "Sequence-level fine-tuning from a checkpoint");
  add_common(finetune);
  finetune->add_option("--base", base, "Base checkpoint")->required();

  std::string ckpt, prefix_text, split, model_name;
  DecodingFlags flags;
  auto* generate = app.add_subcommand("generate", "Decode continuations of a prefix or of split prefixes");
  add_common(generate);
  generate->add_option("--checkpoint", ckpt, "Model checkpoint")->required();
  generate->add_option("--prefix", prefix_text, "Prefix text (default: prefixes from metrics.split)");
  add_decoding_flags(generate, flags);

  auto* eval = app.add_subcommand("eval", "Completion metrics report, histogram CSV and completions");
  add_common(eval);
  eval->add_option("--checkpoint", ckpt, "Model checkpoint")->required();
  eval->add_option("--split", split, "train | valid | test (default: metrics.split)");
  eval->add_option("--model-name", model_name, "Model label in the report (default: checkpoint file stem)");
  add_decoding_flags(eval, flags);

  std::vector<std::size_t> vocab = {5, 50};
  std::size_t trials = 1000, samples = 100;
  std::uint64_t gc_seed = 1;
  double tolerance = 1e-6, model_tolerance = 1e-4;
  bool model_check = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Closed-form vs finite-difference vs backprop gradients");
  gradcheck->add_option("--vocab", vocab, "Vocabulary sizes, cycled over trials")->delimiter(',');
  gradcheck->add_option("--trials", trials, "Random trials");
  gradcheck->add_option("--seed", gc_seed, "Seed");
  gradcheck->add_option("--tolerance", tolerance, "Max relative error for the objective checks");
  gradcheck->add_flag("--model", model_check, "Also check a 2-layer d_model=16 vocab=11 model");
  gradcheck->add_option("--samples", samples, "Parameters sampled in the model check");
  gradcheck->add_option("--model-tolerance", model_tolerance, "Max relative error for the model check");

  std::vector<std::string> report_files;
  std::string csv_path;
  auto* report = app.add_subcommand("report", "Comparison table over metrics reports");
  report->add_option("reports", report_files, "MetricsReport JSON files")->required();
  report->add_option("--csv", csv_path, "Also write the table as CSV");

  std::size_t corpus_bytes = 1000000;
  std::uint64_t corpus_seed = 11;
  std::string corpus_out;
  auto* make_corpus = app.add_subcommand("make-corpus", "Write the synthetic English-like corpus (train/valid/test)");
  make_corpus->add_option("--bytes", corpus_bytes, "Approximate total size");
  make_corpus->add_option("--seed", corpus_seed, "Text seed");
  make_corpus->add_option("--out", corpus_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return report_error("usage", kUsage, e.what());
  }

  try {
    if (train->parsed()) return cmd_train(common);
    if (finetune->parsed()) return cmd_finetune(common, base);
    if (generate->parsed()) return cmd_generate(common, ckpt, prefix_text, flags);
    if (eval->parsed()) return cmd_eval(common, ckpt, split, model_name, flags);
    if (gradcheck->parsed()) {
      return cmd_gradcheck(vocab, trials, gc_seed, tolerance, model_check, samples, model_tolerance);
    }
    if (report->parsed()) return cmd_report(report_files, csv_path);
    if (make_corpus->parsed()) return cmd_make_corpus(corpus_bytes, corpus_seed, corpus_out);
  } catch (const Error& e) {
    switch (e.code()) {
      case ErrorCode::invalid_argument: return report_error("invalid_argument", kUsage, e.what());
      case ErrorCode::io: return report_error("io", kIo, e.what());
      case ErrorCode::schema: return report_error("schema", kSchema, e.what());
      case ErrorCode::numeric: return report_error("numeric", kNumeric, e.what());
      case ErrorCode::format: return report_error("format", kFormat, e.what());
    }
  } catch (const std::exception& e) {
    return report_error("internal", kOther, e.what());
  }
  return kOther;
}
