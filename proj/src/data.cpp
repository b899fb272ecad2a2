#include "modabs/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "modabs/rng.hpp"

namespace modabs {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

namespace {

bool is_word_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
}

}  // namespace

std::vector<std::string> word_split(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  for (char raw : text) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (is_word_char(c)) {
      word.push_back(c);
      continue;
    }
    if (!word.empty()) {
      out.push_back(word);
      word.clear();
    }
    if (!std::isspace(static_cast<unsigned char>(c))) out.push_back(std::string(1, c));
  }
  if (!word.empty()) out.push_back(word);
  return out;
}

std::string normalize_text(const std::string& text) {
  const auto tokens = word_split(text);
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = ids.find(token);
  return it == ids.end() ? kUnk : it->second;
}

Vocabulary Vocabulary::build(const RawSplit& train, int max_size) {
  if (max_size < 5) throw std::invalid_argument("Vocabulary::build: max_size must allow specials plus content");
  std::unordered_map<std::string, long long> counts;
  for (const RawSample& s : train) {
    for (const auto& tok : word_split(s.article)) ++counts[tok];
    for (const RawAspect& a : s.aspects)
      for (const auto& tok : word_split(a.summary)) ++counts[tok];
  }
  std::vector<std::pair<std::string, long long>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  v.tokens = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& [tok, n] : ranked) {
    (void)n;
    if (v.size() >= max_size) break;
    v.tokens.push_back(tok);
  }
  for (int i = 0; i < v.size(); ++i) v.ids[v.tokens[static_cast<size_t>(i)]] = i;
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("Vocabulary::save: cannot open " + path.string());
  for (const auto& tok : tokens) out << tok << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("Vocabulary::load: cannot open " + path.string());
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) v.tokens.push_back(line);
  if (v.size() < 4 || v.tokens[0] != "<pad>" || v.tokens[1] != "<bos>" ||
      v.tokens[2] != "<eos>" || v.tokens[3] != "<unk>")
    throw std::runtime_error("Vocabulary::load: missing special tokens in " + path.string());
  for (int i = 0; i < v.size(); ++i) v.ids[v.tokens[static_cast<size_t>(i)]] = i;
  return v;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> out;
  for (const auto& tok : word_split(text)) out.push_back(vocab.id_of(tok));
  return out;
}

std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token_of(ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Token-level samples
// ---------------------------------------------------------------------------

int Sample::article_token_count() const {
  int n = 0;
  for (const auto& s : source_sentences) n += static_cast<int>(s.size());
  return n;
}

std::vector<int> Sample::article_tokens() const {
  std::vector<int> out;
  out.reserve(static_cast<size_t>(article_token_count()));
  for (const auto& s : source_sentences) out.insert(out.end(), s.begin(), s.end());
  return out;
}

std::vector<std::vector<int>> split_sentences(const std::vector<int>& tokens, const Vocabulary& vocab) {
  const int period = vocab.id_of(".");
  const int bang = vocab.id_of("!");
  const int question = vocab.id_of("?");
  std::vector<std::vector<int>> sentences;
  std::vector<int> current;
  for (int id : tokens) {
    current.push_back(id);
    if (id != Vocabulary::kUnk && (id == period || id == bang || id == question)) {
      sentences.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) sentences.push_back(std::move(current));
  return sentences;
}

Sample to_sample(const RawSample& raw, const Vocabulary& vocab) {
  Sample s;
  s.id = raw.id;
  s.source_sentences = split_sentences(tokenize(raw.article, vocab), vocab);
  for (const RawAspect& a : raw.aspects) {
    Aspect asp;
    asp.name = a.name;
    asp.summary = tokenize(a.summary, vocab);
    if (asp.summary.empty())
      throw std::runtime_error("sample " + raw.id + ": empty summary for aspect '" + a.name + "'");
    s.aspects.push_back(std::move(asp));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation
// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string>& function_words() {
  static const std::vector<std::string> kWords = {
      "the", "a", "is", "are", "on", "in", "it", "this", "and", "of", "to", "with"};
  return kWords;
}

constexpr int kMinTopicWords = 4;

struct TopicLayout {
  std::vector<std::string> shared;                 // overlap pool
  std::vector<std::vector<std::string>> topics;    // per-topic word blocks
};

TopicLayout plan_topics(const CorpusSpec& spec) {
  const int num_topics = std::max(8, 2 * spec.max_aspects());
  const int content = spec.vocab_size - 4 - static_cast<int>(function_words().size()) - 1;
  const int shared = static_cast<int>(std::floor(content * spec.aspect_vocabulary_overlap));
  const int per_topic = (content - shared) / num_topics;
  if (content <= 0 || per_topic < kMinTopicWords) {
    throw std::invalid_argument(
        "corpus spec: vocab_size " + std::to_string(spec.vocab_size) +
        " too small for " + std::to_string(num_topics) + " disjoint topic blocks");
  }
  TopicLayout layout;
  int next = 0;
  auto make_word = [&next]() {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "w%04d", next++);
    return std::string(buf);
  };
  for (int i = 0; i < shared; ++i) layout.shared.push_back(make_word());
  layout.topics.resize(static_cast<size_t>(num_topics));
  for (auto& block : layout.topics)
    for (int i = 0; i < per_topic; ++i) block.push_back(make_word());
  return layout;
}

int draw_aspect_count(const CorpusSpec& spec, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  int last = 2;
  for (const auto& [k, p] : spec.aspect_count_distribution) {
    acc += p;
    last = k;
    if (u < acc) return k;
  }
  return last;
}

std::string make_sentence(const std::vector<std::string>& topic,
                          const std::vector<std::string>& shared,
                          double overlap, Rng& rng) {
  const auto& fn = function_words();
  std::vector<std::string> words;
  words.push_back(fn[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(fn.size()) - 1))]);
  const int content_slots = rng.uniform_int(3, 5);
  for (int i = 0; i < content_slots; ++i) {
    // First two content slots always come from the topic block so every
    // sentence carries an unambiguous topic signal.
    const bool from_shared = i >= 2 && !shared.empty() && rng.uniform() < overlap;
    const auto& pool = from_shared ? shared : topic;
    words.push_back(pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))]);
  }
  std::string s;
  for (const auto& w : words) {
    s += w;
    s += ' ';
  }
  s += '.';
  return s;
}

RawSample make_sample(const CorpusSpec& spec, const TopicLayout& layout,
                      const std::string& id, Rng& rng) {
  const int k = draw_aspect_count(spec, rng);
  std::vector<int> topic_ids(layout.topics.size());
  for (size_t i = 0; i < topic_ids.size(); ++i) topic_ids[i] = static_cast<int>(i);
  rng.shuffle(topic_ids);
  topic_ids.resize(static_cast<size_t>(k));

  struct TaggedSentence {
    int aspect;
    std::string text;
  };
  std::vector<TaggedSentence> sentences;
  std::vector<std::string> summaries(static_cast<size_t>(k));
  for (int a = 0; a < k; ++a) {
    const auto& block = layout.topics[static_cast<size_t>(topic_ids[static_cast<size_t>(a)])];
    const int n = rng.uniform_int(spec.min_sentences_per_aspect, spec.max_sentences_per_aspect);
    for (int s = 0; s < n; ++s) {
      std::string text = make_sentence(block, layout.shared, spec.aspect_vocabulary_overlap, rng);
      if (s == 0) summaries[static_cast<size_t>(a)] = text;  // lead sentence is the reference
      sentences.push_back({a, std::move(text)});
    }
  }
  if (spec.shuffle_sentences) rng.shuffle(sentences);

  RawSample out;
  out.id = id;
  for (size_t i = 0; i < sentences.size(); ++i) {
    if (i) out.article += ' ';
    out.article += sentences[i].text;
  }
  // Reference aspects in order of first appearance in the (shuffled) article.
  std::vector<int> order;
  for (const auto& ts : sentences)
    if (std::find(order.begin(), order.end(), ts.aspect) == order.end()) order.push_back(ts.aspect);
  for (int a : order) {
    RawAspect asp;
    asp.name = "topic" + std::to_string(topic_ids[static_cast<size_t>(a)]);
    asp.summary = summaries[static_cast<size_t>(a)];
    out.aspects.push_back(std::move(asp));
  }
  return out;
}

}  // namespace

void CorpusSpec::validate() const {
  if (train_samples < 0 || valid_samples < 0 || test_samples < 0)
    throw std::invalid_argument("corpus spec: negative sample count");
  if (vocab_size < 5) throw std::invalid_argument("corpus spec: vocab_size too small");
  if (aspect_count_distribution.empty())
    throw std::invalid_argument("corpus spec: empty aspect_count_distribution");
  double total = 0.0;
  for (const auto& [k, p] : aspect_count_distribution) {
    if (k < 2) throw std::invalid_argument("corpus spec: aspect counts must be >= 2");
    if (p < 0.0) throw std::invalid_argument("corpus spec: negative probability");
    total += p;
  }
  if (std::fabs(total - 1.0) > 1e-9)
    throw std::invalid_argument("corpus spec: aspect_count_distribution must sum to 1");
  if (min_sentences_per_aspect < 1 || max_sentences_per_aspect < min_sentences_per_aspect)
    throw std::invalid_argument("corpus spec: invalid sentences_per_aspect range");
  if (aspect_vocabulary_overlap < 0.0 || aspect_vocabulary_overlap >= 1.0)
    throw std::invalid_argument("corpus spec: aspect_vocabulary_overlap must be in [0, 1)");
}

int CorpusSpec::max_aspects() const {
  return aspect_count_distribution.empty() ? 0 : aspect_count_distribution.rbegin()->first;
}

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t tag, uint64_t index) {
  // splitmix64 finalizer over the combined stream id
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag * 0x100000001ULL + index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

RawCorpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const TopicLayout layout = plan_topics(spec);
  RawCorpus corpus;
  auto fill = [&](RawSplit& split, const char* prefix, uint64_t tag, int count) {
    for (int i = 0; i < count; ++i) {
      char id[32];
      std::snprintf(id, sizeof(id), "%s-%06d", prefix, i);
      // Per-sample stream: sample content never depends on how many draws
      // other samples (or the shuffle step) consumed.
      Rng rng(mix_seed(spec.seed, tag, static_cast<uint64_t>(i)));
      split.push_back(make_sample(spec, layout, id, rng));
    }
  };
  fill(corpus.train, "train", 1, spec.train_samples);
  fill(corpus.valid, "valid", 2, spec.valid_samples);
  fill(corpus.test, "test", 3, spec.test_samples);
  return corpus;
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

void save_split(const RawSplit& split, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_split: cannot open " + path.string());
  for (const RawSample& s : split) {
    json j;
    j["id"] = s.id;
    j["article"] = s.article;
    json aspects = json::array();
    for (const RawAspect& a : s.aspects) aspects.push_back({{"name", a.name}, {"summary", a.summary}});
    j["aspects"] = aspects;
    out << j.dump() << '\n';
  }
}

RawSplit load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("load_split: cannot open " + path.string(), 0);
  RawSplit split;
  std::string line;
  int line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw IngestionError(path.string() + ":" + std::to_string(line_number) +
                               ": JSON parse failure: " + e.what(),
                           line_number);
    }
    auto fail = [&](const std::string& what) {
      throw IngestionError(path.string() + ":" + std::to_string(line_number) + ": " + what,
                           line_number);
    };
    if (!j.is_object()) fail("record is not an object");
    if (!j.contains("id") || !j["id"].is_string()) fail("missing or non-string \"id\"");
    if (!j.contains("article") || !j["article"].is_string()) fail("missing or non-string \"article\"");
    if (!j.contains("aspects") || !j["aspects"].is_array()) fail("missing or non-array \"aspects\"");
    RawSample s;
    s.id = j["id"].get<std::string>();
    s.article = j["article"].get<std::string>();
    for (const auto& a : j["aspects"]) {
      if (!a.is_object() || !a.contains("name") || !a["name"].is_string() ||
          !a.contains("summary") || !a["summary"].is_string())
        fail("aspect entries require string \"name\" and \"summary\"");
      s.aspects.push_back({a["name"].get<std::string>(), a["summary"].get<std::string>()});
    }
    split.push_back(std::move(s));
  }
  if (split.empty())
    std::cerr << "warning: " << path.string() << " contains no records\n";
  return split;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

Preprocessed preprocess(const Sample& sample, const Thresholds& thresholds) {
  Preprocessed result;
  if (sample.aspect_count() < 2) {
    result.reject_reason = "single-aspect";
    return result;
  }
  if (sample.aspect_count() > thresholds.max_aspects) {
    result.reject_reason = "too-many-aspects";
    return result;
  }
  result.accepted = true;
  Sample& out = result.sample;
  out.id = sample.id;
  int budget = thresholds.max_article_tokens;
  for (const auto& sentence : sample.source_sentences) {
    if (budget <= 0) break;
    if (static_cast<int>(sentence.size()) <= budget) {
      out.source_sentences.push_back(sentence);
      budget -= static_cast<int>(sentence.size());
    } else {
      out.source_sentences.emplace_back(sentence.begin(), sentence.begin() + budget);
      budget = 0;
    }
  }
  for (const Aspect& a : sample.aspects) {
    Aspect trimmed = a;
    if (static_cast<int>(trimmed.summary.size()) > thresholds.max_summary_tokens)
      trimmed.summary.resize(static_cast<size_t>(thresholds.max_summary_tokens));
    out.aspects.push_back(std::move(trimmed));
  }
  return result;
}

namespace {

int ceil_mean_plus_two_std(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("derive_thresholds: empty corpus");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());  // population variance
  return static_cast<int>(std::ceil(mean + 2.0 * std::sqrt(var)));
}

}  // namespace

Thresholds derive_thresholds(const std::vector<Sample>& samples, int configured_max_aspects) {
  if (samples.empty()) throw std::invalid_argument("derive_thresholds: empty corpus");
  std::vector<double> article_lengths, summary_lengths, counts;
  for (const Sample& s : samples) {
    article_lengths.push_back(static_cast<double>(s.article_token_count()));
    counts.push_back(static_cast<double>(s.aspect_count()));
    for (const Aspect& a : s.aspects)
      summary_lengths.push_back(static_cast<double>(a.summary.size()));
  }
  Thresholds t;
  t.max_article_tokens = ceil_mean_plus_two_std(article_lengths);
  t.max_summary_tokens = ceil_mean_plus_two_std(summary_lengths);
  t.max_aspects = std::min(configured_max_aspects, ceil_mean_plus_two_std(counts));
  return t;
}

Corpus assemble_corpus(const RawCorpus& raw, const Vocabulary& vocab, const Thresholds& thresholds) {
  Corpus corpus;
  corpus.vocab = vocab;
  auto convert = [&](const RawSplit& in, std::vector<Sample>& out) {
    for (const RawSample& r : in) {
      Preprocessed p = preprocess(to_sample(r, vocab), thresholds);
      if (p.accepted) out.push_back(std::move(p.sample));
    }
  };
  convert(raw.train, corpus.train);
  convert(raw.valid, corpus.valid);
  convert(raw.test, corpus.test);
  return corpus;
}

}  // namespace modabs
