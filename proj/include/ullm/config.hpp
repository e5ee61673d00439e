#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ullm/corpus.hpp"
#include "ullm/decoding.hpp"
#include "ullm/model.hpp"
#include "ullm/training.hpp"

namespace ullm {

/// Where the text comes from: three files, or the built-in synthetic
/// generator when `synthetic_bytes` is set.
struct CorpusSource {
  std::string train_path, valid_path, test_path;
  std::optional<std::size_t> synthetic_bytes;
  std::uint64_t synthetic_seed = 11;
};

/// Everything a command needs, validated up front. Key paths:
///   corpus.{train,valid,test,synthetic_bytes,synthetic_seed,mode,min_count,seq_len}
///   model.{n_layers,n_heads,d_model,d_ffn,max_len,seed}
///   train.{objective,alpha,lr,optimizer,max_updates,eval_every,batch_size,clip_norm,seed}
///   finetune.{mix_prob,candidate_mode,ngram,p_penalize,prefix_len,continuation_len,
///             seq_batch_size,base_objective,max_updates,eval_every,lr,seed}
///   decoding[].{strategy,beam_size,block_ngram,top_k,top_p,seed}
///   metrics.{prefix_len,continuation_len,max_prefixes,seq_rep_n,rep_windows,split}
///   run.{out_dir,stamp}
/// Unknown keys are schema errors. Relative paths resolve against the
/// config file's directory.
struct ExperimentConfig {
  std::string source_path;
  CorpusSource source;
  CorpusConfig corpus;
  ModelConfig model;  // vocab_size is filled in once the vocabulary is built
  TrainConfig train;
  FinetuneConfig finetune;
  std::vector<DecodingConfig> decoding;
  CompletionSuite metrics;
  std::string eval_split = "valid";
  std::string out_dir = "runs";
  std::string stamp;
  /// Canonical JSON of the effective config (file values plus overrides,
  /// defaults filled in), echoed into every run directory.
  std::string effective_json;
};

/// Parses JSON text. `overrides` are "dotted.key=value" strings; the value
/// is read as JSON when it parses, as a plain string otherwise.
ExperimentConfig parse_experiment_config(const std::string& text, const std::vector<std::string>& overrides,
                                         const std::string& source_path = "");
ExperimentConfig load_experiment_config(const std::string& path, const std::vector<std::string>& overrides);

/// Loads the corpus named by the config and fixes model.vocab_size.
PreparedCorpus load_corpus(ExperimentConfig& config);

/// Sequences of the named split ("train", "valid" or "test").
const std::vector<TokenSequence>& split_by_name(const PreparedCorpus& corpus, std::string_view name);

/// 8 hex digits of the CRC-32 of `text`.
std::string content_hash(std::string_view text);

}  // namespace ullm
