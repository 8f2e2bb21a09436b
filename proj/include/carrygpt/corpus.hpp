#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "carrygpt/rng.hpp"
#include "carrygpt/tokenizer.hpp"

namespace carrygpt::corpus {

// Default prompt template for numeric QA. The "calculattion" spelling is
// part of the pinned template text.
inline constexpr const char* kDefaultPromptTemplate =
    "Math Question: {question}  Let's analyze and solve the question, but don't write program code, "
    "and write the final number results after ####. Examples:  after calculattion, the square footage "
    "is #### 1000 square feets.";

inline std::string render_template(const std::string& tmpl, const std::string& question) {
    const std::string key = "{question}";
    const std::size_t pos = tmpl.find(key);
    if (pos == std::string::npos) throw DataError("prompt template lacks {question} placeholder");
    std::string out = tmpl;
    out.replace(pos, key.size(), question);
    return out;
}

// Synthetic arithmetic text: newline-separated equations over small
// integers.
inline std::string arithmetic_text(std::size_t min_chars, std::uint64_t seed) {
    Rng rng(seed);
    std::string out;
    out.reserve(min_chars + 32);
    while (out.size() < min_chars) {
        const int a = static_cast<int>(rng.below(100));
        const int b = static_cast<int>(rng.below(100));
        if (rng.bernoulli(0.5)) {
            out += std::to_string(a) + "+" + std::to_string(b) + "=" + std::to_string(a + b) + "\n";
        } else {
            const int hi = std::max(a, b), lo = std::min(a, b);
            out += std::to_string(hi) + "-" + std::to_string(lo) + "=" + std::to_string(hi - lo) + "\n";
        }
    }
    return out;
}

// Base pretraining corpus: arithmetic equations mixed with plain-English
// arithmetic sentences, so the frozen base is a plausible general language
// model over both digits and prose. The #### answer delimiter is kept out
// on purpose: that format belongs to the adaptation task.
inline std::string pretrain_text(std::size_t min_chars, std::uint64_t seed) {
    Rng rng(seed);
    std::string out;
    out.reserve(min_chars + 64);
    while (out.size() < min_chars) {
        const int a = static_cast<int>(rng.below(100));
        const int b = static_cast<int>(rng.below(100));
        const int hi = std::max(a, b), lo = std::min(a, b);
        switch (rng.below(8)) {
            case 0:
            case 1:
            case 2:
                out += std::to_string(a) + "+" + std::to_string(b) + "=" + std::to_string(a + b) + "\n";
                break;
            case 3:
                out += std::to_string(hi) + "-" + std::to_string(lo) + "=" + std::to_string(hi - lo) + "\n";
                break;
            case 4:
                out += "what is " + std::to_string(a) + " plus " + std::to_string(b) + "? it is " +
                       std::to_string(a + b) + ".\n";
                break;
            case 5:
                out += "the sum of " + std::to_string(a) + " and " + std::to_string(b) + " is " +
                       std::to_string(a + b) + ".\n";
                break;
            case 6:
                out += "math question: " + std::to_string(a) + "+" + std::to_string(b) + ". the answer is " +
                       std::to_string(a + b) + ".\n";
                break;
            default:
                out += "let's analyze and solve the question, then write the final number results.\n";
                break;
        }
    }
    return out;
}

// Fixed document set for memorization studies.
inline std::vector<std::string> memorization_docs(int count, std::uint64_t seed) {
    static const char* subjects[] = {"alpha", "bravo", "delta", "gamma", "kappa", "sigma", "theta", "omega"};
    static const char* relations[] = {"maps to", "binds", "routes to", "pairs with"};
    Rng rng(seed);
    std::vector<std::string> docs;
    docs.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        std::ostringstream os;
        os << "fact " << i << ": " << subjects[rng.below(8)] << " " << relations[rng.below(4)] << " "
           << subjects[rng.below(8)] << " at " << rng.below(1000) << "\n";
        docs.push_back(os.str());
    }
    return docs;
}

struct QaItem {
    std::string question;
    std::string answer; // numeric literal
};

// Small-integer addition questions; the carry-on adaptation target.
inline std::vector<QaItem> arithmetic_qa(int count, std::uint64_t seed, int max_operand = 19) {
    Rng rng(seed);
    std::vector<QaItem> items;
    items.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        const int a = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_operand) + 1));
        const int b = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_operand) + 1));
        items.push_back(QaItem{std::to_string(a) + "+" + std::to_string(b), std::to_string(a + b)});
    }
    return items;
}

// The generation target appended after the rendered prompt. The newline
// keeps the answer line distinct from the template's own "#### 1000"
// example, which otherwise misleads greedy decoding.
inline std::string qa_completion(const QaItem& item) { return "\n#### " + item.answer; }

inline std::string qa_full_text(const QaItem& item, const std::string& tmpl) {
    return render_template(tmpl, item.question) + qa_completion(item);
}

// Full training sequence: BOS + prompt + completion + EOS, truncated.
inline TokenSequence qa_sequence(const QaItem& item, const std::string& tmpl, int truncate_len) {
    TokenSequence s = encode_prompt(qa_full_text(item, tmpl));
    s.ids.push_back(kEosId);
    if (truncate_len > 0 && static_cast<int>(s.ids.size()) > truncate_len) s.ids.resize(static_cast<std::size_t>(truncate_len));
    return s;
}

inline std::vector<TokenSequence> qa_sequences(const std::vector<QaItem>& items, const std::string& tmpl,
                                               int truncate_len) {
    std::vector<TokenSequence> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back(qa_sequence(it, tmpl, truncate_len));
    return out;
}

// Raw text chopped into contiguous next-token windows.
inline std::vector<TokenSequence> text_sequences(const std::string& text, int window) {
    const std::vector<int> tokens = encode_bytes(text);
    if (static_cast<int>(tokens.size()) < window + 1) throw DataError("text shorter than one training window");
    std::vector<TokenSequence> out;
    for (std::size_t off = 0; off + static_cast<std::size_t>(window) + 1 <= tokens.size();
         off += static_cast<std::size_t>(window)) {
        TokenSequence s;
        s.ids.assign(tokens.begin() + static_cast<std::ptrdiff_t>(off),
                     tokens.begin() + static_cast<std::ptrdiff_t>(off + static_cast<std::size_t>(window) + 1));
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<QaItem> load_qa_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open qa file: " + path);
    std::vector<QaItem> items;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            QaItem it;
            it.question = j.at("question").get<std::string>();
            if (j.at("answer").is_string())
                it.answer = j.at("answer").get<std::string>();
            else
                it.answer = j.at("answer").dump();
            items.push_back(std::move(it));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("bad qa jsonl at " + path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return items;
}

inline void save_qa_jsonl(const std::string& path, const std::vector<QaItem>& items) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write qa file: " + path);
    for (const auto& it : items) {
        const nlohmann::json j{{"question", it.question}, {"answer", it.answer}};
        out << j.dump() << "\n";
    }
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write file: " + path);
    out << text;
}

} // namespace carrygpt::corpus
