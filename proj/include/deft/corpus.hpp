#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "deft/error.hpp"
#include "deft/text_io.hpp"

namespace deft {

using TokenId = std::uint32_t;

// ---------------------------------------------------------------------------
// Word splitting
// ---------------------------------------------------------------------------

namespace detail {

// Decodes one UTF-8 code point starting at text[pos]; advances pos. Invalid
// bytes decode as themselves so the splitter stays total.
inline char32_t next_code_point(std::string_view text, std::size_t& pos, std::size_t& width) {
  const auto b0 = static_cast<unsigned char>(text[pos]);
  auto continuation = [&](std::size_t k) -> int {
    if (pos + k >= text.size()) return -1;
    const auto b = static_cast<unsigned char>(text[pos + k]);
    return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
  };
  char32_t cp = b0;
  width = 1;
  if (b0 >= 0xC0 && b0 < 0xE0) {
    const int c1 = continuation(1);
    if (c1 >= 0) {
      cp = ((b0 & 0x1F) << 6) | c1;
      width = 2;
    }
  } else if (b0 >= 0xE0 && b0 < 0xF0) {
    const int c1 = continuation(1), c2 = continuation(2);
    if (c1 >= 0 && c2 >= 0) {
      cp = ((b0 & 0x0F) << 12) | (c1 << 6) | c2;
      width = 3;
    }
  } else if (b0 >= 0xF0 && b0 < 0xF8) {
    const int c1 = continuation(1), c2 = continuation(2), c3 = continuation(3);
    if (c1 >= 0 && c2 >= 0 && c3 >= 0) {
      cp = ((b0 & 0x07) << 18) | (c1 << 12) | (c2 << 6) | c3;
      width = 4;
    }
  }
  pos += width;
  return cp;
}

inline bool is_unicode_space(char32_t cp) {
  switch (cp) {
    case U' ': case U'\t': case U'\n': case U'\v': case U'\f': case U'\r':
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

inline bool is_punctuation(char32_t cp) {
  if (cp < 0x80) {
    return (cp >= 0x21 && cp <= 0x2F) || (cp >= 0x3A && cp <= 0x40) ||
           (cp >= 0x5B && cp <= 0x60) || (cp >= 0x7B && cp <= 0x7E);
  }
  return (cp >= 0x2010 && cp <= 0x2027) || (cp >= 0x2030 && cp <= 0x205E) ||
         (cp >= 0x3001 && cp <= 0x3003) || cp == 0xA1 || cp == 0xBF || cp == 0xAB ||
         cp == 0xBB;
}

}  // namespace detail

// Splits on Unicode whitespace and punctuation; each punctuation character is
// its own token. "don't stop." -> don ' t stop .
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t start = pos;
    std::size_t width = 0;
    const char32_t cp = detail::next_code_point(text, pos, width);
    if (detail::is_unicode_space(cp)) {
      if (!current.empty()) words.push_back(std::move(current)), current.clear();
    } else if (detail::is_punctuation(cp)) {
      if (!current.empty()) words.push_back(std::move(current)), current.clear();
      words.emplace_back(text.substr(start, width));
    } else {
      current.append(text.substr(start, width));
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

inline constexpr std::string_view kUnknownToken = "<unk>";
inline constexpr std::string_view kBosToken = "<bos>";

// Dense token table. Ids 0 and 1 are the reserved unknown and
// begin-of-sequence entries.
class Vocab {
 public:
  static constexpr TokenId unknown_id = 0;
  static constexpr TokenId bos_id = 1;

  Vocab() : Vocab(std::vector<std::string>{}) {}

  // `tokens` excludes the two reserved entries.
  explicit Vocab(const std::vector<std::string>& tokens) {
    tokens_.reserve(tokens.size() + 2);
    tokens_.emplace_back(kUnknownToken);
    tokens_.emplace_back(kBosToken);
    for (const auto& t : tokens) tokens_.push_back(t);
    index_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i].empty()) throw InvalidInput("vocab token " + std::to_string(i) + " is empty");
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
        throw InvalidInput("duplicate vocab token '" + tokens_[i] + "'");
      }
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token_of(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  TokenId lookup(std::string_view token) const {
    const auto it = index_.find(std::string(token));
    return it == index_.end() ? unknown_id : it->second;
  }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }

  // One token per line; line number is the id.
  void write(std::ostream& os) const {
    for (const auto& t : tokens_) os << t << '\n';
  }

  static Vocab read(const std::filesystem::path& path) {
    auto lines = read_lines(path);
    if (lines.size() < 2 || lines[0] != kUnknownToken || lines[1] != kBosToken) {
      throw InvalidInput("vocab file '" + path.string() + "' must start with <unk> and <bos>");
    }
    return Vocab(std::vector<std::string>(lines.begin() + 2, lines.end()));
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.lookup(w));
  return ids;
}

// ---------------------------------------------------------------------------
// Preference data
// ---------------------------------------------------------------------------

struct Response {
  std::string text;
  std::optional<double> score;

  friend bool operator==(const Response&, const Response&) = default;
};

// One prompt and its responses, best first.
struct PreferenceSample {
  std::string id;
  std::string prompt;
  std::vector<Response> responses;
  std::optional<std::string> subset;

  std::size_t rank_length() const noexcept { return responses.size(); }
  bool has_scores() const {
    return std::all_of(responses.begin(), responses.end(),
                       [](const Response& r) { return r.score.has_value(); });
  }

  friend bool operator==(const PreferenceSample&, const PreferenceSample&) = default;
};

struct Dataset {
  std::vector<PreferenceSample> samples;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }

  std::set<std::string> subsets() const {
    std::set<std::string> tags;
    for (const auto& s : samples) {
      if (s.subset) tags.insert(*s.subset);
    }
    return tags;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Checks the per-sample invariants: rank length, non-empty responses and
// non-increasing scores. Throws InvalidInput naming the sample.
inline void validate_sample(const PreferenceSample& s) {
  if (s.responses.size() < 2) {
    throw InvalidInput("sample '" + s.id + "': rank_length < 2");
  }
  for (std::size_t i = 0; i < s.responses.size(); ++i) {
    if (split_words(s.responses[i].text).empty()) {
      throw InvalidInput("sample '" + s.id + "': response " + std::to_string(i) +
                         " is empty after tokenization");
    }
  }
  const bool any_score = std::any_of(s.responses.begin(), s.responses.end(),
                                     [](const Response& r) { return r.score.has_value(); });
  if (any_score && !s.has_scores()) {
    throw InvalidInput("sample '" + s.id + "': scores must be given for all responses or none");
  }
  if (any_score) {
    for (std::size_t i = 1; i < s.responses.size(); ++i) {
      if (*s.responses[i].score > *s.responses[i - 1].score) {
        throw InvalidInput("sample '" + s.id + "': scores not non-increasing");
      }
    }
  }
}

enum class DatasetFormat {
  ranked,           // {id?, prompt, responses: [{text, score?}], subset?}
  chosen_rejected,  // {id?, prompt?, chosen, rejected, subset?} (HH-RLHF style)
};

namespace detail {

inline std::string json_id(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw InvalidInput("field 'id' must be a string or integer");
}

// HH-RLHF dialogues share everything up to the final assistant turn.
inline void split_dialogue(const std::string& chosen, const std::string& rejected,
                           std::string& prompt, std::string& chosen_reply,
                           std::string& rejected_reply) {
  constexpr std::string_view marker = "Assistant:";
  std::size_t common = 0;
  while (common < chosen.size() && common < rejected.size() && chosen[common] == rejected[common]) {
    ++common;
  }
  const auto cut = std::string_view(chosen).substr(0, common).rfind(marker);
  const std::size_t at = cut == std::string_view::npos ? 0 : cut + marker.size();
  prompt = chosen.substr(0, at);
  chosen_reply = chosen.substr(at);
  rejected_reply = rejected.substr(at);
}

inline PreferenceSample parse_record(const nlohmann::json& j, std::size_t line_index,
                                     DatasetFormat format) {
  if (!j.is_object()) throw InvalidInput("record is not an object");
  PreferenceSample s;
  s.id = j.contains("id") ? json_id(j.at("id")) : std::to_string(line_index);
  if (j.contains("subset") && !j.at("subset").is_null()) s.subset = j.at("subset").get<std::string>();

  if (format == DatasetFormat::ranked) {
    if (!j.contains("prompt")) throw InvalidInput("missing field 'prompt'");
    if (!j.contains("responses") || !j.at("responses").is_array()) {
      throw InvalidInput("missing array field 'responses'");
    }
    s.prompt = j.at("prompt").get<std::string>();
    for (const auto& r : j.at("responses")) {
      Response resp;
      if (r.is_string()) {
        resp.text = r.get<std::string>();
      } else if (r.is_object() && r.contains("text")) {
        resp.text = r.at("text").get<std::string>();
        if (r.contains("score") && !r.at("score").is_null()) resp.score = r.at("score").get<double>();
      } else {
        throw InvalidInput("response must be a string or an object with 'text'");
      }
      s.responses.push_back(std::move(resp));
    }
  } else {
    if (!j.contains("chosen") || !j.contains("rejected")) {
      throw InvalidInput("missing field 'chosen' or 'rejected'");
    }
    auto chosen = j.at("chosen").get<std::string>();
    auto rejected = j.at("rejected").get<std::string>();
    if (j.contains("prompt")) {
      s.prompt = j.at("prompt").get<std::string>();
    } else {
      split_dialogue(chosen, rejected, s.prompt, chosen, rejected);
    }
    s.responses.push_back({std::move(chosen), std::nullopt});
    s.responses.push_back({std::move(rejected), std::nullopt});
  }
  return s;
}

}  // namespace detail

// Parses line-delimited records. Blank lines are skipped; ids default to the
// 0-based line index. Order is preserved.
inline Dataset parse_dataset(std::istream& in, DatasetFormat format = DatasetFormat::ranked) {
  Dataset ds;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_index = 0;
  for (; std::getline(in, line); ++line_index) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    PreferenceSample s;
    try {
      s = detail::parse_record(nlohmann::json::parse(line), line_index, format);
      validate_sample(s);
    } catch (const nlohmann::json::exception& e) {
      throw InvalidInput("line " + std::to_string(line_index + 1) + ": malformed record: " + e.what());
    } catch (const InvalidInput& e) {
      throw InvalidInput("line " + std::to_string(line_index + 1) + ": " + e.what());
    }
    if (!seen.insert(s.id).second) {
      throw InvalidInput("line " + std::to_string(line_index + 1) + ": duplicate id '" + s.id + "'");
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& path,
                            DatasetFormat format = DatasetFormat::ranked) {
  auto in = open_input(path);
  try {
    return parse_dataset(in, format);
  } catch (const InvalidInput& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  for (const auto& s : ds.samples) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["prompt"] = s.prompt;
    auto responses = nlohmann::ordered_json::array();
    for (const auto& r : s.responses) {
      nlohmann::ordered_json rj;
      rj["text"] = r.text;
      if (r.score) rj["score"] = *r.score;
      responses.push_back(std::move(rj));
    }
    j["responses"] = std::move(responses);
    if (s.subset) j["subset"] = *s.subset;
    os << j.dump() << '\n';
  }
}

inline void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  write_atomically(path, [&](std::ostream& os) { write_dataset(os, ds); });
}

// ---------------------------------------------------------------------------
// Vocabulary construction
// ---------------------------------------------------------------------------

struct VocabOptions {
  std::size_t min_count = 1;
  bool include_prompts = false;
};

// Every token seen at least min_count times, by descending count then
// lexicographically.
inline Vocab build_vocab(const Dataset& ds, const VocabOptions& options = {}) {
  if (ds.empty()) throw InvalidInput("cannot build a vocabulary from an empty dataset");
  std::map<std::string, std::size_t> counts;
  auto count_text = [&](const std::string& text) {
    for (auto& w : split_words(text)) ++counts[std::move(w)];
  };
  for (const auto& s : ds.samples) {
    if (options.include_prompts) count_text(s.prompt);
    for (const auto& r : s.responses) count_text(r.text);
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= std::max<std::size_t>(options.min_count, 1) && tok != kUnknownToken && tok != kBosToken) {
      kept.emplace_back(tok, n);
    }
  }
  if (kept.empty()) throw InvalidInput("corpus is empty after tokenization and min_count filtering");
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  tokens.reserve(kept.size());
  for (auto& [tok, n] : kept) tokens.push_back(std::move(tok));
  return Vocab(tokens);
}

// ---------------------------------------------------------------------------
// Tokenized samples
// ---------------------------------------------------------------------------

struct TokenizedSample {
  std::string id;
  std::string subset;
  std::vector<TokenId> prompt;
  std::vector<std::vector<TokenId>> responses;  // best first
  std::vector<double> scores;                   // empty when unscored
};

inline TokenizedSample tokenize_sample(const PreferenceSample& s, const Vocab& vocab) {
  TokenizedSample t;
  t.id = s.id;
  t.subset = s.subset.value_or("");
  t.prompt = tokenize(s.prompt, vocab);
  for (const auto& r : s.responses) t.responses.push_back(tokenize(r.text, vocab));
  if (s.has_scores()) {
    for (const auto& r : s.responses) t.scores.push_back(*r.score);
  }
  return t;
}

inline std::vector<TokenizedSample> tokenize_dataset(const Dataset& ds, const Vocab& vocab) {
  std::vector<TokenizedSample> out;
  out.reserve(ds.size());
  for (const auto& s : ds.samples) out.push_back(tokenize_sample(s, vocab));
  return out;
}

// Pre-tokenized input from an external (e.g. subword) tokenizer, one record
// per line: {"id", "prompt_ids": [...], "response_ids": [[...], ...], "subset"?}.
// Ids must be below vocab_size.
inline std::vector<TokenizedSample> load_pretokenized(const std::filesystem::path& path,
                                                      std::size_t vocab_size) {
  std::vector<TokenizedSample> out;
  std::unordered_set<std::string> seen;
  std::size_t line_index = 0;
  for (const auto& line : read_lines(path)) {
    ++line_index;
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto where = path.string() + ": line " + std::to_string(line_index) + ": ";
    TokenizedSample t;
    try {
      const auto j = nlohmann::json::parse(line);
      t.id = j.contains("id") ? detail::json_id(j.at("id")) : std::to_string(line_index - 1);
      if (j.contains("subset")) t.subset = j.at("subset").get<std::string>();
      t.prompt = j.value("prompt_ids", std::vector<TokenId>{});
      t.responses = j.at("response_ids").get<std::vector<std::vector<TokenId>>>();
    } catch (const nlohmann::json::exception& e) {
      throw InvalidInput(where + "malformed record: " + e.what());
    }
    if (t.responses.size() < 2) throw InvalidInput(where + "rank_length < 2");
    for (const auto& r : t.responses) {
      if (r.empty()) throw InvalidInput(where + "empty response");
    }
    auto check = [&](const std::vector<TokenId>& ids) {
      for (auto id : ids) {
        if (id >= vocab_size) throw InvalidInput(where + "token id " + std::to_string(id) + " out of range");
      }
    };
    check(t.prompt);
    for (const auto& r : t.responses) check(r);
    if (!seen.insert(t.id).second) throw InvalidInput(where + "duplicate id '" + t.id + "'");
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace deft
