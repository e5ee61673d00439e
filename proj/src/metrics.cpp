#include "ullm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ullm/model.hpp"

namespace ullm {

namespace {

void check_aligned(const std::vector<TokenSequence>& sequences,
                   const std::vector<std::vector<TokenId>>& predictions) {
  require(sequences.size() == predictions.size(), "metrics: predictions do not match sequences");
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    require(!sequences[s].ids.empty() && predictions[s].size() == sequences[s].size() - 1,
            "metrics: sequence " + std::to_string(s) + " has the wrong number of predictions");
  }
}

// Counts positions whose predicted token is in the previous l tokens, and
// whether the prediction also differs from the truth when `wrong_only`.
double repetition_rate(const std::vector<TokenSequence>& sequences,
                       const std::vector<std::vector<TokenId>>& predictions, std::size_t l,
                       bool wrong_only) {
  require(l >= 1, "rep/l requires l >= 1");
  check_aligned(sequences, predictions);
  std::size_t hits = 0;
  std::size_t total = 0;
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const auto& ids = sequences[s].ids;
    for (std::size_t t = 1; t < ids.size(); ++t) {
      const TokenId pred = predictions[s][t - 1];
      const std::size_t from = t > l ? t - l : 0;
      const bool repeat = std::find(ids.begin() + static_cast<std::ptrdiff_t>(from),
                                    ids.begin() + static_cast<std::ptrdiff_t>(t), pred) !=
                          ids.begin() + static_cast<std::ptrdiff_t>(t);
      if (repeat && (!wrong_only || pred != ids[t])) ++hits;
      ++total;
    }
  }
  require(total > 0, "rep/l: no predicted positions");
  return static_cast<double>(hits) / static_cast<double>(total);
}

std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos && !field.empty()) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

// Splits one CSV record starting at `pos`; quoted fields may span lines.
std::vector<std::string> csv_record(const std::string& text, std::size_t& pos) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  while (pos < text.size()) {
    const char c = text[pos++];
    if (quoted) {
      if (c == '"') {
        if (pos < text.size() && text[pos] == '"') {
          cur += '"';
          ++pos;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c == '\n') {
      break;
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

}  // namespace

std::optional<double> seq_rep_n(std::span<const TokenId> continuation, std::size_t n) {
  require(n >= 1, "seq-rep-n requires n >= 1");
  if (continuation.size() < n) return std::nullopt;
  std::set<std::vector<TokenId>> unique;
  const std::size_t total = continuation.size() - n + 1;
  for (std::size_t s = 0; s < total; ++s) {
    unique.emplace(continuation.begin() + static_cast<std::ptrdiff_t>(s),
                   continuation.begin() + static_cast<std::ptrdiff_t>(s + n));
  }
  return 1.0 - static_cast<double>(unique.size()) / static_cast<double>(total);
}

double mean_seq_rep_n(const std::vector<std::vector<TokenId>>& continuations, std::size_t n,
                      std::size_t* skipped) {
  double sum = 0.0;
  std::size_t used = 0;
  std::size_t short_ones = 0;
  for (const auto& c : continuations) {
    if (const auto v = seq_rep_n(c, n)) {
      sum += *v;
      ++used;
    } else {
      ++short_ones;
    }
  }
  if (skipped) *skipped = short_ones;
  require(used > 0, "seq-rep-" + std::to_string(n) + ": no continuation has at least n tokens");
  return sum / static_cast<double>(used);
}

TeacherForcedPass teacher_forced_pass(const LanguageModel& model,
                                      const std::vector<TokenSequence>& sequences) {
  require(!sequences.empty(), "teacher-forced evaluation needs at least one sequence");
  TeacherForcedPass pass;
  pass.predictions.reserve(sequences.size());
  pass.nll.reserve(sequences.size());
  for (const auto& seq : sequences) {
    require(seq.size() >= 2, "teacher-forced evaluation needs sequences of length >= 2");
    const std::span<const TokenId> inputs(seq.ids.data(), seq.ids.size() - 1);
    const MatrixD logits = model.logits(inputs);
    std::vector<TokenId> preds(inputs.size());
    std::vector<double> nll(inputs.size());
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      const auto r = static_cast<Eigen::Index>(t);
      const VectorD lp = log_softmax(logits.row(r).transpose());
      preds[t] = static_cast<TokenId>(argmax(lp));
      nll[t] = -lp(seq.ids[t + 1]);
    }
    pass.predictions.push_back(std::move(preds));
    pass.nll.push_back(std::move(nll));
  }
  return pass;
}

double rep_l(const std::vector<TokenSequence>& sequences,
             const std::vector<std::vector<TokenId>>& predictions, std::size_t l) {
  return repetition_rate(sequences, predictions, l, false);
}

double wrep_l(const std::vector<TokenSequence>& sequences,
              const std::vector<std::vector<TokenId>>& predictions, std::size_t l) {
  return repetition_rate(sequences, predictions, l, true);
}

double human_rep_l(const std::vector<TokenSequence>& sequences, std::size_t l) {
  std::vector<std::vector<TokenId>> truth;
  truth.reserve(sequences.size());
  for (const auto& s : sequences) truth.emplace_back(s.ids.begin() + 1, s.ids.end());
  return repetition_rate(sequences, truth, l, false);
}

std::size_t uniq(const std::vector<std::vector<TokenId>>& predictions) {
  std::set<TokenId> seen;
  for (const auto& p : predictions) seen.insert(p.begin(), p.end());
  return seen.size();
}

std::size_t uniq_seq(const std::vector<std::vector<TokenId>>& continuations) {
  return uniq(continuations);
}

double perplexity(const std::vector<std::vector<double>>& nll) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& seq : nll) {
    for (double v : seq) {
      if (std::isnan(v)) throw Error(ErrorCode::numeric, "perplexity: NaN log-likelihood");
      sum += v;
      ++count;
    }
  }
  require(count > 0, "perplexity: no tokens");
  return std::exp(sum / static_cast<double>(count));
}

double next_token_accuracy(const std::vector<TokenSequence>& sequences,
                           const std::vector<std::vector<TokenId>>& predictions) {
  check_aligned(sequences, predictions);
  std::size_t correct = 0;
  std::size_t total = 0;
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    for (std::size_t t = 1; t < sequences[s].size(); ++t) {
      correct += predictions[s][t - 1] == sequences[s].ids[t] ? 1 : 0;
      ++total;
    }
  }
  require(total > 0, "accuracy: no predicted positions");
  return static_cast<double>(correct) / static_cast<double>(total);
}

double perplexity(const LanguageModel& model, const std::vector<TokenSequence>& sequences) {
  return perplexity(teacher_forced_pass(model, sequences).nll);
}

double next_token_accuracy(const LanguageModel& model, const std::vector<TokenSequence>& sequences) {
  return next_token_accuracy(sequences, teacher_forced_pass(model, sequences).predictions);
}

TokenHistogram token_histogram(const std::vector<std::vector<TokenId>>& token_lists) {
  TokenHistogram h;
  for (const auto& list : token_lists) {
    for (TokenId id : list) ++h[id];
  }
  return h;
}

void export_histogram_csv(const TokenHistogram& histogram, const Vocabulary& vocab,
                          const std::string& path) {
  std::vector<std::pair<TokenId, std::size_t>> rows(histogram.begin(), histogram.end());
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write histogram to " + path);
  out << "token,id,count,frequency_rank\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << csv_quote(vocab.token(rows[i].first)) << ',' << rows[i].first << ',' << rows[i].second << ','
        << (i + 1) << '\n';
  }
  if (!out) throw Error(ErrorCode::io, "failed writing histogram to " + path);
}

TokenHistogram read_histogram_csv(const std::string& path) {
  const std::string text = read_text_file(path);
  std::size_t pos = 0;
  const auto header = csv_record(text, pos);
  if (header != std::vector<std::string>{"token", "id", "count", "frequency_rank"}) {
    throw Error(ErrorCode::format, "histogram CSV " + path + " has an unexpected header");
  }
  TokenHistogram h;
  while (pos < text.size()) {
    const auto fields = csv_record(text, pos);
    if (fields.size() == 1 && fields[0].empty()) continue;
    if (fields.size() != 4) throw Error(ErrorCode::format, "histogram CSV " + path + ": bad row");
    h[static_cast<TokenId>(std::stoul(fields[1]))] = std::stoull(fields[2]);
  }
  return h;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["model"] = model;
  j["search"] = search;
  for (const auto& [n, v] : seq_rep) j["seq_rep_" + std::to_string(n)] = v;
  if (uniq_seq) j["uniq_seq"] = *uniq_seq;
  if (ppl) j["ppl"] = *ppl;
  if (acc) j["acc"] = *acc;
  for (const auto& [l, v] : rep) j["rep_" + std::to_string(l)] = v;
  for (const auto& [l, v] : wrep) j["wrep_" + std::to_string(l)] = v;
  if (uniq) j["uniq"] = *uniq;
  return j.dump(2) + "\n";
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::format, std::string("metrics report is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::schema, "metrics report must be a JSON object");
  MetricsReport r;
  auto suffix = [](const std::string& key, const std::string& prefix) -> std::optional<std::size_t> {
    if (key.rfind(prefix, 0) != 0 || key.size() == prefix.size()) return std::nullopt;
    const std::string rest = key.substr(prefix.size());
    if (!std::all_of(rest.begin(), rest.end(), [](char c) { return c >= '0' && c <= '9'; })) return std::nullopt;
    return std::stoul(rest);
  };
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "model") r.model = value.get<std::string>();
      else if (key == "search") r.search = value.get<std::string>();
      else if (key == "uniq") r.uniq = value.get<std::size_t>();
      else if (key == "uniq_seq") r.uniq_seq = value.get<std::size_t>();
      else if (key == "ppl") r.ppl = value.get<double>();
      else if (key == "acc") r.acc = value.get<double>();
      else if (auto n = suffix(key, "seq_rep_")) r.seq_rep[*n] = value.get<double>();
      else if (auto l = suffix(key, "wrep_")) r.wrep[*l] = value.get<double>();
      else if (auto l2 = suffix(key, "rep_")) r.rep[*l2] = value.get<double>();
      else throw Error(ErrorCode::schema, "metrics report has unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::schema, std::string("metrics report has a mistyped field: ") + e.what());
  }
  return r;
}

}  // namespace ullm
