#pragma once

// Text corpus with ordered train/val/test splits, deterministic calibration
// window sampling, and the Alpaca-shaped instruction format with prompt
// rendering + completion masking. Tokens are bytes; byte 0 is end-of-text.

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "qlr/common.hpp"

namespace qlr {

constexpr int kEndOfText = 0;

inline std::vector<int> bytes_to_tokens(const std::string& s) {
  std::vector<int> out(s.size());
  for (size_t i = 0; i < s.size(); ++i) out[i] = static_cast<unsigned char>(s[i]);
  return out;
}

inline std::string tokens_to_string(const std::vector<int>& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  return out;
}

struct TextCorpus {
  std::vector<uint8_t> bytes;
  size_t train_end = 0;  // [0, train_end) is train
  size_t val_end = 0;    // [train_end, val_end) is val, [val_end, size) is test
  std::string source_id;

  static TextCorpus from_bytes(std::vector<uint8_t> data, std::string source_id,
                               double train_frac = 0.90, double val_frac = 0.05) {
    check(!data.empty(), "corpus: empty text");
    check(train_frac > 0 && val_frac >= 0 && train_frac + val_frac < 1.0,
          "corpus: bad split fractions");
    TextCorpus c;
    c.bytes = std::move(data);
    c.train_end = static_cast<size_t>(c.bytes.size() * train_frac);
    c.val_end = static_cast<size_t>(c.bytes.size() * (train_frac + val_frac));
    c.source_id = std::move(source_id);
    return c;
  }

  static TextCorpus load(const std::string& path, double train_frac = 0.90,
                         double val_frac = 0.05) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "corpus: cannot open ", path);
    std::vector<uint8_t> data((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
    auto c = from_bytes(std::move(data), path, train_frac, val_frac);
    c.source_id = strcat(path, "#", hex64(fnv1a64(c.bytes.data(), c.bytes.size())));
    return c;
  }

  std::vector<int> tokens(size_t begin, size_t end) const {
    check(begin <= end && end <= bytes.size(), "corpus: bad span");
    std::vector<int> out(end - begin);
    for (size_t i = begin; i < end; ++i) out[i - begin] = bytes[i];
    return out;
  }

  std::vector<int> val_tokens() const { return tokens(train_end, val_end); }
  std::vector<int> test_tokens() const { return tokens(val_end, bytes.size()); }
};

// n contiguous windows of exactly ctx_len bytes from the train split,
// start positions uniform under the seed.
inline std::vector<std::vector<int>> sample_calibration(const TextCorpus& corpus, int n,
                                                        int ctx_len, uint64_t seed) {
  check(n >= 1 && ctx_len >= 1, "sample_calibration: bad arguments");
  check(corpus.train_end >= static_cast<size_t>(ctx_len),
        "sample_calibration: corpus too small, train split has ", corpus.train_end,
        " bytes < ctx_len ", ctx_len);
  const size_t max_start = corpus.train_end - ctx_len;
  Rng rng(seed);
  std::vector<std::vector<int>> out(n);
  for (auto& seq : out) {
    const size_t start = static_cast<size_t>(rng.randint(0, static_cast<int64_t>(max_start)));
    seq = corpus.tokens(start, start + ctx_len);
  }
  return out;
}

struct InstructionSample {
  std::string instruction;
  std::string input;  // may be empty
  std::string output;
};

// JSON-lines, Alpaca-shaped: {"instruction": ..., "input": ..., "output": ...}.
// Malformed lines are hard errors with their line number.
inline std::vector<InstructionSample> load_instructions(const std::string& path) {
  std::ifstream f(path);
  check(f.good(), "instructions: cannot open ", path);
  std::vector<InstructionSample> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    check(!j.is_discarded(), "instructions: malformed JSON at line ", lineno);
    check(j.is_object() && j.contains("instruction") && j.contains("output"),
          "instructions: line ", lineno, " needs 'instruction' and 'output' keys");
    InstructionSample s;
    s.instruction = j["instruction"].get<std::string>();
    s.input = j.value("input", std::string());
    s.output = j["output"].get<std::string>();
    check(!s.output.empty(), "instructions: empty output at line ", lineno);
    out.push_back(std::move(s));
  }
  return out;
}

struct PromptTemplate {
  std::string with_input =
      "Below is an instruction with an input. Write a response.\n"
      "### Instruction:\n{instruction}\n### Input:\n{input}\n### Response:\n";
  std::string no_input =
      "Below is an instruction. Write a response.\n"
      "### Instruction:\n{instruction}\n### Response:\n";

  void validate() const {
    check(with_input.find("{instruction}") != std::string::npos &&
              with_input.find("{input}") != std::string::npos,
          "template: with_input variant needs {instruction} and {input} slots");
    check(no_input.find("{instruction}") != std::string::npos,
          "template: no_input variant needs an {instruction} slot");
  }
};

struct RenderedPrompt {
  std::vector<int> tokens;        // prompt + completion + end-of-text
  std::vector<uint8_t> mask;      // true exactly on completion and EOT positions
  int completion_begin = 0;
};

namespace detail {
inline std::string substitute(std::string text, const std::string& slot, const std::string& value) {
  const size_t pos = text.find(slot);
  if (pos != std::string::npos) text.replace(pos, slot.size(), value);
  return text;
}
}  // namespace detail

// Left-truncates the prompt when the rendered text overflows ctx_len; the
// completion is never cut. Mask covers the completion and the EOT byte.
inline RenderedPrompt render_prompt(const InstructionSample& sample, const PromptTemplate& tpl,
                                    int ctx_len) {
  tpl.validate();
  std::string prompt = sample.input.empty()
                           ? detail::substitute(tpl.no_input, "{instruction}", sample.instruction)
                           : detail::substitute(
                                 detail::substitute(tpl.with_input, "{instruction}", sample.instruction),
                                 "{input}", sample.input);
  std::vector<int> prompt_tokens = bytes_to_tokens(prompt);
  std::vector<int> completion = bytes_to_tokens(sample.output);
  completion.push_back(kEndOfText);
  check(static_cast<int>(completion.size()) <= ctx_len,
        "render_prompt: completion of ", completion.size(), " tokens exceeds ctx_len ", ctx_len);
  const size_t budget = static_cast<size_t>(ctx_len) - completion.size();
  if (prompt_tokens.size() > budget)
    prompt_tokens.erase(prompt_tokens.begin(),
                        prompt_tokens.begin() + (prompt_tokens.size() - budget));
  RenderedPrompt out;
  out.completion_begin = static_cast<int>(prompt_tokens.size());
  out.tokens = std::move(prompt_tokens);
  out.tokens.insert(out.tokens.end(), completion.begin(), completion.end());
  out.mask.assign(out.tokens.size(), 0);
  for (size_t i = out.completion_begin; i < out.tokens.size(); ++i) out.mask[i] = 1;
  return out;
}

}  // namespace qlr
