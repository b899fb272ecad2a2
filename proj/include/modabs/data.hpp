#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace modabs {

/// Errors raised while reading corpus files; carries the 1-based line number
/// when the failure is tied to a specific line (0 otherwise).
class IngestionError : public std::runtime_error {
 public:
  IngestionError(std::string message, int line)
      : std::runtime_error(std::move(message)), line_number(line) {}
  int line_number;
};

// ---------------------------------------------------------------------------
// String-level corpus (the JSONL interchange schema).
// ---------------------------------------------------------------------------

struct RawAspect {
  std::string name;
  std::string summary;
};

struct RawSample {
  std::string id;
  std::string article;
  std::vector<RawAspect> aspects;
};

using RawSplit = std::vector<RawSample>;

struct RawCorpus {
  RawSplit train, valid, test;
};

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

/// Lowercased word/punctuation segmentation: runs of [a-z0-9_] are words,
/// any other non-space character is a single-character token.
std::vector<std::string> word_split(const std::string& text);

/// Canonical surface form: lowercased tokens joined by single spaces.
std::string normalize_text(const std::string& text);

struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  std::vector<std::string> tokens;  // id -> surface form
  std::unordered_map<std::string, int> ids;

  int size() const { return static_cast<int>(tokens.size()); }
  int id_of(const std::string& token) const;
  const std::string& token_of(int id) const { return tokens.at(static_cast<size_t>(id)); }

  /// Builds from the training split: specials first, then tokens by
  /// descending frequency (ties alphabetical), capped at max_size.
  static Vocabulary build(const RawSplit& train, int max_size);

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);
};

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab);
std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Token-level samples
// ---------------------------------------------------------------------------

struct Aspect {
  std::string name;
  std::vector<int> summary;  // token ids, non-empty
};

struct Sample {
  std::string id;
  std::vector<std::vector<int>> source_sentences;
  std::vector<Aspect> aspects;

  int aspect_count() const { return static_cast<int>(aspects.size()); }
  int article_token_count() const;
  std::vector<int> article_tokens() const;
};

/// Sentence segmentation on sentence-final punctuation tokens (. ! ?),
/// which stay attached to their sentence.
std::vector<std::vector<int>> split_sentences(const std::vector<int>& tokens, const Vocabulary& vocab);

Sample to_sample(const RawSample& raw, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Synthetic corpus generation
// ---------------------------------------------------------------------------

struct CorpusSpec {
  int train_samples = 0;
  int valid_samples = 0;
  int test_samples = 0;
  int vocab_size = 0;
  std::map<int, double> aspect_count_distribution;  // aspects (>= 2) -> probability
  int min_sentences_per_aspect = 2;
  int max_sentences_per_aspect = 3;
  double aspect_vocabulary_overlap = 0.0;  // in [0, 1)
  bool shuffle_sentences = true;
  uint64_t seed = 42;

  void validate() const;  // throws std::invalid_argument with a message
  int max_aspects() const;
};

/// Deterministic function of the spec (including its seed). Each sample draws
/// an aspect count, assigns each aspect a mostly-disjoint topic vocabulary
/// plus a shared overlap pool, emits template sentences per aspect with the
/// lead sentence as the reference summary, then shuffles sentence order
/// globally. Aspects are listed in order of first appearance in the article.
RawCorpus generate_corpus(const CorpusSpec& spec);

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

void save_split(const RawSplit& split, const std::filesystem::path& path);
RawSplit load_split(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Preprocessing (truncation thresholds and aspect-count filtering)
// ---------------------------------------------------------------------------

struct Thresholds {
  int max_article_tokens = 0;
  int max_summary_tokens = 0;
  int max_aspects = 0;
};

struct Preprocessed {
  bool accepted = false;
  Sample sample;
  std::string reject_reason;  // "single-aspect" | "too-many-aspects"
};

Preprocessed preprocess(const Sample& sample, const Thresholds& thresholds);

/// ceil(mean + 2*std) of article and per-aspect summary token lengths
/// (population std); max_aspects additionally capped at configured_max.
Thresholds derive_thresholds(const std::vector<Sample>& samples, int configured_max_aspects);

// ---------------------------------------------------------------------------
// Tokenized corpus assembly
// ---------------------------------------------------------------------------

struct Corpus {
  std::vector<Sample> train, valid, test;
  Vocabulary vocab;
};

/// Tokenizes and preprocesses all three splits; rejected samples are dropped.
Corpus assemble_corpus(const RawCorpus& raw, const Vocabulary& vocab, const Thresholds& thresholds);

}  // namespace modabs
