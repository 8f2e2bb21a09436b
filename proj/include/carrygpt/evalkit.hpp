#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>

#include "carrygpt/corpus.hpp"
#include "carrygpt/train.hpp"

namespace carrygpt {

// Pulls the last valid numeric value preceded by the #### delimiter.
// Decimals and fractions are matched before plain integers so "3/4" reads
// as a fraction; fractions carry no sign. A zero denominator invalidates
// that occurrence.
inline std::optional<double> extract_answer(const std::string& text) {
    static const std::regex pattern(R"(####\s*(-?\d+\.\d+|\d+/\d+|-?\d+))");
    std::optional<double> result;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), pattern); it != std::sregex_iterator(); ++it) {
        const std::string token = (*it)[1].str();
        const std::size_t slash = token.find('/');
        if (slash != std::string::npos) {
            const double num = std::stod(token.substr(0, slash));
            const double den = std::stod(token.substr(slash + 1));
            if (den == 0.0) continue; // invalid occurrence, keep earlier matches
            result = num / den;
        } else {
            result = std::stod(token);
        }
    }
    return result;
}

// Integers compare exactly; non-integral values within 1e-9 relative.
inline bool numeric_match(double got, double gold) {
    const bool both_integral = std::floor(got) == got && std::floor(gold) == gold;
    if (both_integral) return got == gold;
    return std::abs(got - gold) <= 1e-9 * std::max({std::abs(got), std::abs(gold), 1.0});
}

// Greedy decoding over any logits provider; ties pick the smallest id.
inline std::vector<int> greedy_decode(const std::function<Tensor(const TokenSequence&)>& logits_fn,
                                      const TokenSequence& prompt, int max_new_tokens, int max_total_len,
                                      int eos_id = kEosId) {
    TokenSequence seq = prompt;
    std::vector<int> generated;
    for (int t = 0; t < max_new_tokens && static_cast<int>(seq.size()) < max_total_len; ++t) {
        const Tensor logits = logits_fn(seq);
        const int last = logits.rows() - 1;
        int best = 0;
        for (int j = 1; j < logits.cols(); ++j)
            if (logits.at(last, j) > logits.at(last, best)) best = j;
        generated.push_back(best);
        seq.ids.push_back(best);
        if (best == eos_id) break;
    }
    return generated;
}

// A frozen base plus its trained carry-on, evaluated through the same
// quantization bridge used in training.
struct EvalBundle {
    const BaseModel* base = nullptr;
    const CarryOnModel* carry = nullptr;
    int bits = 0;
    std::string base_id = "main";

    Tensor carry_logits(const TokenSequence& seq, double alpha) const {
        const TapSet taps = local_taps(*base, base_id, seq, carry->needed_depths(), bits);
        CarryOnModel::ForwardOptions opt;
        opt.train_mode = false;
        opt.head_base = base;
        return carry->forward_logits(taps, Tensor::scalar(static_cast<Real>(alpha)), opt);
    }
};

// Mean per-sample masked cross-entropy at the given alpha, dropout off.
inline double val_cross_entropy(const EvalBundle& bundle, const std::vector<TokenSequence>& stream, double alpha,
                                int mask_before = 30) {
    if (stream.empty()) throw EvalError("val_cross_entropy: empty stream");
    std::vector<TapSet> taps;
    taps.reserve(stream.size());
    for (const auto& s : stream) taps.push_back(local_taps(*bundle.base, bundle.base_id, s.inputs(),
                                                           bundle.carry->needed_depths(), bundle.bits));
    std::vector<TokenSequence> seqs = stream;
    return detail::val_loss_over(*bundle.carry, taps, seqs, alpha, mask_before, bundle.base);
}

struct EvalItemRecord {
    int id = 0;
    std::string question;
    double gold = 0;
    std::optional<double> extracted_base;
    std::optional<double> extracted_carryon;
    bool match_base = false;
    bool match_carryon = false;
};

struct EvalReport {
    double val_loss = 0;
    bool has_val_loss = false;
    double accuracy_base = 0;
    double accuracy_carryon = 0;
    double alpha = 0;
    std::vector<EvalItemRecord> items;

    nlohmann::json to_json() const {
        nlohmann::json j;
        if (has_val_loss) j["val_loss"] = val_loss;
        j["accuracy_base"] = accuracy_base;
        j["accuracy_carryon"] = accuracy_carryon;
        j["alpha"] = alpha;
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& it : items) {
            nlohmann::json ji{{"id", it.id},
                              {"question", it.question},
                              {"gold", it.gold},
                              {"match_base", it.match_base},
                              {"match_carryon", it.match_carryon}};
            if (it.extracted_base) ji["extracted_base"] = *it.extracted_base;
            if (it.extracted_carryon) ji["extracted_carryon"] = *it.extracted_carryon;
            arr.push_back(std::move(ji));
        }
        j["items"] = arr;
        return j;
    }

    void write_json(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot write report: " + path);
        out << to_json().dump(2) << "\n";
    }

    void write_csv(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot write report: " + path);
        out << "id,question,gold,extracted_base,extracted_carryon,match_base,match_carryon\n";
        for (const auto& it : items) {
            char base_s[40] = "", carry_s[40] = "";
            if (it.extracted_base) std::snprintf(base_s, sizeof(base_s), "%.17g", *it.extracted_base);
            if (it.extracted_carryon) std::snprintf(carry_s, sizeof(carry_s), "%.17g", *it.extracted_carryon);
            out << it.id << ",\"" << it.question << "\"," << it.gold << "," << base_s << "," << carry_s << ","
                << (it.match_base ? 1 : 0) << "," << (it.match_carryon ? 1 : 0) << "\n";
        }
    }
};

struct ExactMatchOptions {
    std::string prompt_template = corpus::kDefaultPromptTemplate;
    int max_new_tokens = 800;
    double alpha = -1; // < 0: use the bundle's stored alpha
};

// Greedy-decodes every question through both pathways and scores exact
// numeric matches against the gold answers.
inline EvalReport exact_match_accuracy(const EvalBundle& bundle, const std::vector<corpus::QaItem>& qa,
                                       const ExactMatchOptions& opt = {}) {
    if (qa.empty()) throw EvalError("exact_match_accuracy: empty qa set");
    const double alpha = opt.alpha >= 0 ? opt.alpha : bundle.carry->alpha;
    EvalReport report;
    report.alpha = alpha;
    const int max_total = bundle.base->cfg.max_seq;
    int base_hits = 0, carry_hits = 0;
    for (std::size_t qi = 0; qi < qa.size(); ++qi) {
        EvalItemRecord rec;
        rec.id = static_cast<int>(qi);
        rec.question = qa[qi].question;
        try {
            rec.gold = std::stod(qa[qi].answer);
        } catch (const std::exception&) {
            throw DataError("gold answer is not numeric: " + qa[qi].answer);
        }
        const TokenSequence prompt = encode_prompt(corpus::render_template(opt.prompt_template, qa[qi].question));
        if (static_cast<int>(prompt.size()) >= max_total)
            throw DataError("prompt longer than the base context window");

        const auto base_fn = [&](const TokenSequence& s) { return bundle.base->base_logits(s); };
        const std::string base_text = decode_bytes(greedy_decode(base_fn, prompt, opt.max_new_tokens, max_total));
        rec.extracted_base = extract_answer(base_text);
        rec.match_base = rec.extracted_base && numeric_match(*rec.extracted_base, rec.gold);

        const auto carry_fn = [&](const TokenSequence& s) { return bundle.carry_logits(s, alpha); };
        const std::string carry_text = decode_bytes(greedy_decode(carry_fn, prompt, opt.max_new_tokens, max_total));
        rec.extracted_carryon = extract_answer(carry_text);
        rec.match_carryon = rec.extracted_carryon && numeric_match(*rec.extracted_carryon, rec.gold);

        base_hits += rec.match_base ? 1 : 0;
        carry_hits += rec.match_carryon ? 1 : 0;
        report.items.push_back(std::move(rec));
    }
    report.accuracy_base = static_cast<double>(base_hits) / static_cast<double>(qa.size());
    report.accuracy_carryon = static_cast<double>(carry_hits) / static_cast<double>(qa.size());
    return report;
}

} // namespace carrygpt
