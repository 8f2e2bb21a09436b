// carrygpt: frozen-base + trainable carry-on pipeline.
//
// Subcommands: gen-data, pretrain-base, serve, train, eval, alpha-report.
// Exit codes: 0 ok, 1 runtime failure, 2 usage/config error.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "carrygpt/carryon.hpp"
#include "carrygpt/corpus.hpp"
#include "carrygpt/evalkit.hpp"
#include "carrygpt/manifest.hpp"
#include "carrygpt/splitnode.hpp"
#include "carrygpt/train.hpp"

using namespace carrygpt;

namespace {

EmbeddingServer* g_server = nullptr;

void handle_sigint(int) {
    if (g_server != nullptr) g_server->request_stop();
}

std::vector<int> parse_depths(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stoi(item));
    }
    if (out.empty()) throw ConfigError("no tap depths given");
    return out;
}

std::vector<double> parse_alphas(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    if (out.empty()) throw ConfigError("no alphas given");
    return out;
}

std::array<std::uint8_t, 32> parse_hash_hex(const std::string& hex) {
    if (hex.size() != 64) throw ConfigError("model hash must be 64 hex characters");
    std::array<std::uint8_t, 32> out{};
    for (int i = 0; i < 32; ++i) out[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(std::stoi(hex.substr(static_cast<std::size_t>(2 * i), 2), nullptr, 16));
    return out;
}

void require_file(const std::string& path, const std::string& what) {
    if (!std::filesystem::exists(path)) throw ConfigError(what + " not found: " + path);
}

// Training/eval corpora: .jsonl files are QA sets rendered through the
// prompt template, anything else is raw text cut into windows.
std::vector<TokenSequence> load_sequences(const std::string& path, const std::string& tmpl, int truncate_len,
                                          int window) {
    require_file(path, "corpus");
    if (path.size() > 6 && path.substr(path.size() - 6) == ".jsonl")
        return corpus::qa_sequences(corpus::load_qa_jsonl(path), tmpl, truncate_len);
    return corpus::text_sequences(corpus::read_text_file(path), window);
}

std::string load_template(const std::string& path) {
    if (path.empty()) return corpus::kDefaultPromptTemplate;
    require_file(path, "prompt template");
    std::string t = corpus::read_text_file(path);
    while (!t.empty() && (t.back() == '\n' || t.back() == '\r')) t.pop_back();
    return t;
}

struct BundlePaths {
    std::string base;
    std::string carryon;
};

BundlePaths load_bundle(const std::string& path) {
    require_file(path, "bundle");
    const auto j = nlohmann::json::parse(corpus::read_text_file(path));
    BundlePaths b;
    b.base = j.at("base").get<std::string>();
    b.carryon = j.at("carryon").get<std::string>();
    const auto dir = std::filesystem::path(path).parent_path();
    if (!std::filesystem::exists(b.base)) b.base = (dir / b.base).string();
    if (!std::filesystem::exists(b.carryon)) b.carryon = (dir / b.carryon).string();
    require_file(b.base, "bundle base model");
    require_file(b.carryon, "bundle carry-on model");
    return b;
}

int cmd_gen_data(const std::string& out_dir, std::uint64_t seed, int pretrain_chars, int qa_train, int qa_val,
                 int qa_eval, int memorize_docs, int max_operand) {
    std::filesystem::create_directories(out_dir);
    const auto path = [&](const std::string& name) { return (std::filesystem::path(out_dir) / name).string(); };

    RunManifest manifest;
    manifest.command = "gen-data";
    manifest.seed = seed;
    manifest.config = {{"pretrain_chars", pretrain_chars}, {"qa_train", qa_train},     {"qa_val", qa_val},
                       {"qa_eval", qa_eval},               {"memorize", memorize_docs}, {"max_operand", max_operand}};
    manifest.outputs = {path("pretrain.txt"), path("memorize.txt"),  path("qa_train.jsonl"),
                        path("qa_val.jsonl"), path("qa_eval.jsonl"), path("template.txt")};
    manifest.write(path("gen-data.manifest.json"));

    corpus::write_text_file(path("pretrain.txt"),
                            corpus::pretrain_text(static_cast<std::size_t>(pretrain_chars), Rng::mix(seed, 1)));
    std::string memo;
    for (const auto& doc : corpus::memorization_docs(memorize_docs, Rng::mix(seed, 2))) memo += doc;
    corpus::write_text_file(path("memorize.txt"), memo);
    corpus::save_qa_jsonl(path("qa_train.jsonl"), corpus::arithmetic_qa(qa_train, Rng::mix(seed, 3), max_operand));
    corpus::save_qa_jsonl(path("qa_val.jsonl"), corpus::arithmetic_qa(qa_val, Rng::mix(seed, 4), max_operand));
    corpus::save_qa_jsonl(path("qa_eval.jsonl"), corpus::arithmetic_qa(qa_eval, Rng::mix(seed, 5), max_operand));
    corpus::write_text_file(path("template.txt"), std::string(corpus::kDefaultPromptTemplate) + "\n");
    std::cout << "wrote corpora to " << out_dir << "\n";
    return 0;
}

int cmd_pretrain(const std::string& corpus_path, const std::string& config_path, const std::string& out_path,
                 std::int64_t steps, double lr, int batch, int seq_len, std::uint64_t seed_override,
                 const std::string& curves_path) {
    require_file(corpus_path, "corpus");
    BaseConfig cfg;
    if (!config_path.empty()) {
        require_file(config_path, "base config");
        cfg = BaseConfig::from_json(nlohmann::json::parse(corpus::read_text_file(config_path)));
    }
    if (seed_override != 0) cfg.seed = seed_override;

    PretrainOptions opt;
    opt.steps = steps;
    opt.lr = static_cast<Real>(lr);
    opt.batch_size = batch;
    opt.seq_len = seq_len;

    RunManifest manifest;
    manifest.command = "pretrain-base";
    manifest.seed = cfg.seed;
    manifest.config = cfg.to_json();
    manifest.config["steps"] = steps;
    manifest.config["lr"] = lr;
    manifest.config["batch_size"] = batch;
    manifest.config["seq_len"] = seq_len;
    manifest.inputs = {corpus_path};
    manifest.outputs = {out_path};
    manifest.write(out_path + ".manifest.json");

    std::vector<CurveRow> curves;
    const auto t0 = std::chrono::steady_clock::now();
    opt.on_step = [&](std::int64_t step, Real loss, Real lr_now) {
        const auto ms =
            std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
        curves.push_back(CurveRow{step, "train", 0.0, static_cast<double>(loss), static_cast<double>(lr_now), ms});
        if (step % 100 == 0 || step + 1 == steps)
            std::cout << "step " << step << "/" << steps << " loss " << loss << "\n";
    };
    const BaseModel model = pretrain_base(corpus::read_text_file(corpus_path), cfg, opt);
    model.save(out_path);
    if (!curves_path.empty()) write_curves_csv(curves_path, curves);
    std::cout << "saved base model to " << out_path << " (sha256 " << Sha256::hex(Sha256::hash_file(out_path))
              << ")\n";
    return 0;
}

int cmd_serve(const std::string& model_path, const std::string& bind, int bits, const std::string& depths_csv,
              bool push, const std::string& push_corpus_path, const std::string& template_path, int window) {
    require_file(model_path, "model");
    ServeOptions opt;
    opt.bind = bind;
    opt.push = push;
    opt.push_bits = bits;

    // the model must load before we can validate depths
    BaseModel model = BaseModel::load(model_path);
    if (!depths_csv.empty()) {
        opt.push_depths = parse_depths(depths_csv);
        for (int d : opt.push_depths)
            if (d < 0 || d > model.cfg.layers)
                throw ConfigError("depth " + std::to_string(d) + " outside [0, " + std::to_string(model.cfg.layers) +
                                  "]");
    }
    if (push) {
        if (push_corpus_path.empty()) throw ConfigError("push mode needs --corpus");
        opt.push_corpus = load_sequences(push_corpus_path, load_template(template_path), model.cfg.max_seq, window);
        if (opt.push_depths.empty()) opt.push_depths = {model.cfg.layers};
    }

    EmbeddingServer server(std::move(model), Sha256::hash_file(model_path), opt);
    g_server = &server;
    std::signal(SIGINT, handle_sigint);
    std::signal(SIGTERM, handle_sigint);
    std::cout << "listening on port " << server.port() << "\n" << std::flush;
    const int rc = server.run();
    g_server = nullptr;
    return rc;
}

int cmd_train(const std::string& mode, const std::string& base_path, const std::string& endpoint,
              const std::string& base_hash_hex, const std::string& carry_config_path,
              const std::string& train_path, const std::string& val_path, const std::string& out_path,
              int epochs, int batch, double lr, int mask_before, int truncate_len, const std::string& alpha_mode,
              double alpha_init, int bits, std::uint64_t seed, const std::string& curves_path,
              const std::string& template_path, const std::string& general_val_path, bool verbose,
              bool train_base, double base_lr) {
    require_file(carry_config_path, "carry-on config");

    const std::string tmpl = load_template(template_path);
    CarryOnConfig cfg = CarryOnConfig::from_json(nlohmann::json::parse(corpus::read_text_file(carry_config_path)));
    if (alpha_init >= 0) cfg.alpha_init = alpha_init;

    // the base file is required locally in local mode and whenever the
    // carry-on reuses the base output head
    BaseModel base;
    bool base_loaded = false;
    if (!base_path.empty()) {
        require_file(base_path, "base model");
        base = BaseModel::load(base_path);
        base_loaded = true;
    }
    if (mode == "local" && !base_loaded) throw ConfigError("train --mode local needs --base");
    if (cfg.head.reuse_base && !base_loaded)
        throw ConfigError("head reuse needs --base (the frozen output head lives there)");

    TrainOptions opt;
    opt.epochs = epochs;
    opt.batch_size = batch;
    opt.mask_before = mask_before;
    opt.truncate_len = truncate_len;
    opt.lr_peak = static_cast<Real>(lr);
    opt.alpha_mode = alpha_mode_from_name(alpha_mode);
    opt.seed = seed;
    opt.head_base = base_loaded ? &base : nullptr;
    opt.checkpoint_path = out_path;
    opt.verbose = verbose;
    if (train_base) {
        if (mode != "local") throw ConfigError("--train-base is local-mode only: no gradient crosses the wire");
        if (!base_loaded) throw ConfigError("--train-base needs --base");
        opt.train_base = &base;
        opt.base_lr = static_cast<Real>(base_lr);
    }

    const auto train_set = load_sequences(train_path, tmpl, truncate_len, truncate_len - 1);
    const auto val_set = load_sequences(val_path, tmpl, truncate_len, truncate_len - 1);
    std::vector<TokenSequence> general_set;
    if (!general_val_path.empty()) general_set = load_sequences(general_val_path, tmpl, truncate_len, truncate_len - 1);

    RunManifest manifest;
    manifest.command = "train";
    manifest.seed = seed;
    manifest.config = cfg.to_json();
    manifest.config["mode"] = mode;
    manifest.config["epochs"] = epochs;
    manifest.config["batch_size"] = batch;
    manifest.config["lr"] = lr;
    manifest.config["mask_before"] = mask_before;
    manifest.config["alpha_mode"] = alpha_mode;
    manifest.config["bits"] = bits;
    manifest.inputs = {carry_config_path, train_path, val_path};
    if (base_loaded) manifest.inputs.push_back(base_path);
    manifest.outputs = {out_path};
    manifest.write(out_path + ".manifest.json");

    CarryOnModel carry = CarryOnModel::init(cfg, seed);
    TrainResult result;
    if (mode == "local") {
        if (train_base) {
            GraphTapSource source(base, cfg.bases[0].id, carry.needed_depths());
            result = train_carryon(carry, source, train_set, val_set, opt,
                                   general_set.empty() ? nullptr : &general_set);
            base.freeze();
            base.save(out_path + ".base.cgpt");
        } else {
            LocalTapSource source(base, cfg.bases[0].id, carry.needed_depths(), bits);
            result = train_carryon(carry, source, train_set, val_set, opt,
                                   general_set.empty() ? nullptr : &general_set);
        }
    } else if (mode == "remote") {
        if (endpoint.empty()) throw ConfigError("train --mode remote needs --endpoint");
        SessionConfig session;
        session.endpoint = endpoint;
        session.depths = carry.needed_depths();
        session.bits = bits;
        session.d_base = cfg.bases[0].dim;
        session.base_id = cfg.bases[0].id;
        if (!base_hash_hex.empty())
            session.base_model_hash = parse_hash_hex(base_hash_hex);
        else if (base_loaded)
            session.base_model_hash = Sha256::hash_file(base_path);
        else
            throw ConfigError("train --mode remote needs --base-hash or --base");
        result = train_remote(carry, session, train_set, val_set, opt,
                              general_set.empty() ? nullptr : &general_set);
        std::cout << "wire bytes/step: " << result.bytes_per_step << "\n";
    } else {
        throw ConfigError("train mode must be local or remote");
    }

    nlohmann::json extra;
    extra["bits"] = bits;
    if (base_loaded) extra["base_hash"] = Sha256::hex(Sha256::hash_file(base_path));
    carry.save(out_path, extra);
    if (!curves_path.empty()) write_curves_csv(curves_path, result.curves);

    // companion bundle file so eval can find both halves
    if (base_loaded) {
        nlohmann::json bundle{{"base", base_path}, {"carryon", out_path}};
        corpus::write_text_file(out_path + ".bundle.json", bundle.dump(2) + "\n");
    }

    std::cout << "final val loss " << result.final_val_loss << " at alpha " << carry.alpha << "\n";
    for (const auto& rec : result.alpha_state.history) {
        std::cout << "epoch " << rec.epoch << " alpha candidates:";
        for (const auto& c : rec.candidates) std::cout << " " << c.alpha << ":" << c.j_val;
        std::cout << " -> " << rec.chosen << "\n";
    }
    return 0;
}

int cmd_eval(const std::string& bundle_path, const std::string& qa_path, double alpha,
             const std::string& template_path, int max_new_tokens, int bits_override,
             const std::string& out_json, const std::string& out_csv, int mask_before,
             const std::string& val_path) {
    const BundlePaths paths = load_bundle(bundle_path);
    require_file(qa_path, "qa set");

    const BaseModel base = BaseModel::load(paths.base);
    const CarryOnModel carry = CarryOnModel::load(paths.carryon);
    const ModelFile carry_file = load_model_file(paths.carryon);
    int bits = carry_file.config.value("bits", 0);
    if (bits_override >= 0) bits = bits_override;

    EvalBundle bundle{&base, &carry, bits, carry.cfg.bases[0].id};
    ExactMatchOptions opt;
    opt.prompt_template = load_template(template_path);
    opt.max_new_tokens = max_new_tokens;
    opt.alpha = alpha;

    RunManifest manifest;
    manifest.command = "eval";
    manifest.seed = 0;
    manifest.config = {{"alpha", alpha}, {"bits", bits}, {"max_new_tokens", max_new_tokens}};
    manifest.inputs = {paths.base, paths.carryon, qa_path};
    if (!out_json.empty()) {
        manifest.outputs.push_back(out_json);
        manifest.write(out_json + ".manifest.json");
    }

    EvalReport report = exact_match_accuracy(bundle, corpus::load_qa_jsonl(qa_path), opt);
    if (!val_path.empty()) {
        const auto val_set = load_sequences(val_path, opt.prompt_template, base.cfg.max_seq, base.cfg.max_seq - 1);
        report.val_loss = val_cross_entropy(bundle, val_set, report.alpha, mask_before);
        report.has_val_loss = true;
    }
    if (!out_json.empty()) report.write_json(out_json);
    if (!out_csv.empty()) report.write_csv(out_csv);
    std::cout << "alpha " << report.alpha << "\n";
    if (report.has_val_loss) std::cout << "val loss " << report.val_loss << "\n";
    std::cout << "accuracy base " << report.accuracy_base << "\n";
    std::cout << "accuracy carryon " << report.accuracy_carryon << "\n";
    return 0;
}

int cmd_alpha_report(const std::string& bundle_path, const std::string& val_path, const std::string& alphas_csv,
                     double tol, int mask_before, const std::string& template_path, const std::string& out_csv) {
    const BundlePaths paths = load_bundle(bundle_path);
    require_file(val_path, "validation set");

    const BaseModel base = BaseModel::load(paths.base);
    const CarryOnModel carry = CarryOnModel::load(paths.carryon);
    const ModelFile carry_file = load_model_file(paths.carryon);
    const int bits = carry_file.config.value("bits", 0);
    const EvalBundle bundle{&base, &carry, bits, carry.cfg.bases[0].id};

    const std::string tmpl = load_template(template_path);
    const auto val_set = load_sequences(val_path, tmpl, base.cfg.max_seq, base.cfg.max_seq - 1);

    std::vector<double> alphas = parse_alphas(alphas_csv);
    std::sort(alphas.begin(), alphas.end());
    std::vector<AlphaCandidate> samples;
    for (double a : alphas) {
        const double j = val_cross_entropy(bundle, val_set, a, mask_before);
        samples.push_back({a, j});
        std::printf("alpha %8.4f  J_val %.6f\n", a, j);
    }
    const QuasiConvexReport rep = check_quasiconvex(samples, tol);
    if (rep.quasi_convex) {
        std::cout << "quasi-convex: yes\n";
    } else {
        std::printf("quasi-convex: no (J(%.4f)=%.6f exceeds bracket [%.4f, %.4f])\n",
                    samples[static_cast<std::size_t>(rep.mid)].alpha,
                    samples[static_cast<std::size_t>(rep.mid)].j_val,
                    samples[static_cast<std::size_t>(rep.lo)].alpha,
                    samples[static_cast<std::size_t>(rep.hi)].alpha);
    }
    if (!out_csv.empty()) {
        std::ofstream out(out_csv, std::ios::trunc);
        out << "alpha,j_val\n";
        for (const auto& s : samples) out << s.alpha << "," << s.j_val << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"frozen-base + carry-on training pipeline"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "write the bundled synthetic corpora");
    std::string gen_out = "data";
    std::uint64_t gen_seed = 7;
    int gen_pretrain_chars = 200000, gen_qa_train = 2000, gen_qa_val = 32, gen_qa_eval = 100, gen_memo = 3000;
    int gen_max_operand = 19;
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--seed", gen_seed, "corpus seed");
    gen->add_option("--pretrain-chars", gen_pretrain_chars);
    gen->add_option("--qa-train", gen_qa_train);
    gen->add_option("--qa-val", gen_qa_val);
    gen->add_option("--qa-eval", gen_qa_eval);
    gen->add_option("--memorize", gen_memo);
    gen->add_option("--max-operand", gen_max_operand);

    // pretrain-base
    auto* pre = app.add_subcommand("pretrain-base", "pretrain and freeze the base model");
    std::string pre_corpus, pre_config, pre_out = "base.cgpt", pre_curves;
    std::int64_t pre_steps = 2000;
    double pre_lr = 3e-3;
    int pre_batch = 8, pre_seq = 96;
    std::uint64_t pre_seed = 0;
    pre->add_option("--corpus", pre_corpus, "training text")->required();
    pre->add_option("--config", pre_config, "base config json");
    pre->add_option("--out", pre_out, "output model file");
    pre->add_option("--steps", pre_steps);
    pre->add_option("--lr", pre_lr);
    pre->add_option("--batch", pre_batch);
    pre->add_option("--seq-len", pre_seq);
    pre->add_option("--seed", pre_seed, "overrides the config seed");
    pre->add_option("--curves", pre_curves, "loss curve csv");
    pre->set_config("--config-file");

    // serve
    auto* srv = app.add_subcommand("serve", "run the inference node");
    std::string srv_model, srv_bind = "127.0.0.1:7070", srv_depths, srv_corpus, srv_template;
    int srv_bits = 4, srv_window = 256;
    bool srv_push = false;
    srv->add_option("--model", srv_model, "frozen base model")->required();
    srv->add_option("--bind", srv_bind, "bind address host:port")->envname("CARRYGPT_BIND");
    srv->add_option("--bits", srv_bits, "push-mode quantization bits");
    srv->add_option("--depths", srv_depths, "comma-separated tap depths");
    srv->add_flag("--push", srv_push, "stream a server-side corpus");
    srv->add_option("--corpus", srv_corpus, "push-mode corpus");
    srv->add_option("--template", srv_template, "prompt template file");
    srv->add_option("--window", srv_window, "push-mode text window");
    srv->set_config("--config-file");

    // train
    auto* trn = app.add_subcommand("train", "train a carry-on");
    std::string trn_mode = "local", trn_base, trn_endpoint, trn_hash, trn_cfg, trn_train, trn_val, trn_general;
    std::string trn_out = "carryon.cgpt", trn_curves, trn_template, trn_alpha_mode = "grid";
    int trn_epochs = 2, trn_batch = 8, trn_mask = 30, trn_trunc = 512, trn_bits = 4;
    double trn_lr = 1e-4, trn_alpha_init = -1;
    std::uint64_t trn_seed = 1;
    bool trn_verbose = false;
    trn->add_option("--mode", trn_mode, "local | remote");
    trn->add_option("--base", trn_base, "frozen base model file");
    trn->add_option("--endpoint", trn_endpoint, "inference node address")->envname("CARRYGPT_ENDPOINT");
    trn->add_option("--base-hash", trn_hash, "expected base model sha256 (hex)");
    trn->add_option("--carryon-config", trn_cfg, "carry-on config json")->required();
    trn->add_option("--train", trn_train, "training corpus (.jsonl or text)")->required();
    trn->add_option("--val", trn_val, "validation corpus")->required();
    trn->add_option("--general-val", trn_general, "general validation corpus (balance mode)");
    trn->add_option("--out", trn_out, "output checkpoint");
    trn->add_option("--epochs", trn_epochs);
    trn->add_option("--batch-size", trn_batch);
    trn->add_option("--lr", trn_lr);
    trn->add_option("--mask-before", trn_mask, "loss masked before this position");
    trn->add_option("--truncate", trn_trunc, "sequence truncation length");
    trn->add_option("--alpha-mode", trn_alpha_mode, "fixed | neighborhood | grid | balance");
    trn->add_option("--alpha-init", trn_alpha_init, "initial rescale factor");
    trn->add_option("--bits", trn_bits, "bridge quantization bits (0,2,3,4,8)");
    trn->add_option("--seed", trn_seed);
    trn->add_option("--curves", trn_curves, "loss curve csv");
    trn->add_option("--template", trn_template, "prompt template file");
    trn->add_flag("--verbose", trn_verbose);
    bool trn_train_base = false;
    double trn_base_lr = 1e-5;
    trn->add_flag("--train-base", trn_train_base, "also train the base (local mode, bridge bypassed)");
    trn->add_option("--base-lr", trn_base_lr, "base learning rate when --train-base is set");
    trn->set_config("--config-file");

    // eval
    auto* evl = app.add_subcommand("eval", "exact-match evaluation");
    std::string evl_bundle, evl_qa, evl_template, evl_json, evl_csv, evl_val;
    double evl_alpha = -1;
    int evl_max_new = 800, evl_bits = -1, evl_mask = 30;
    evl->add_option("--bundle", evl_bundle, "bundle json {base, carryon}")->required();
    evl->add_option("--qa", evl_qa, "qa jsonl file")->required();
    evl->add_option("--alpha", evl_alpha, "override the stored alpha");
    evl->add_option("--template", evl_template, "prompt template file");
    evl->add_option("--max-new-tokens", evl_max_new);
    evl->add_option("--bits", evl_bits, "override the stored bridge bits");
    evl->add_option("--val", evl_val, "also report val loss on this corpus");
    evl->add_option("--mask-before", evl_mask);
    evl->add_option("--out-json", evl_json);
    evl->add_option("--out-csv", evl_csv);
    evl->set_config("--config-file");

    // alpha-report
    auto* rep = app.add_subcommand("alpha-report", "validation loss per alpha + quasi-convexity");
    std::string rep_bundle, rep_val, rep_alphas = "0.3,0.5,1.0,2.0,3.0", rep_template, rep_csv;
    double rep_tol = 1e-9;
    int rep_mask = 30;
    rep->add_option("--bundle", rep_bundle)->required();
    rep->add_option("--val", rep_val)->required();
    rep->add_option("--alphas", rep_alphas, "comma-separated candidates");
    rep->add_option("--tol", rep_tol, "quasi-convexity tolerance");
    rep->add_option("--mask-before", rep_mask);
    rep->add_option("--template", rep_template);
    rep->add_option("--out-csv", rep_csv);
    rep->set_config("--config-file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(gen_out, gen_seed, gen_pretrain_chars, gen_qa_train, gen_qa_val, gen_qa_eval,
                                gen_memo, gen_max_operand);
        if (pre->parsed())
            return cmd_pretrain(pre_corpus, pre_config, pre_out, pre_steps, pre_lr, pre_batch, pre_seq, pre_seed,
                                pre_curves);
        if (srv->parsed())
            return cmd_serve(srv_model, srv_bind, srv_bits, srv_depths, srv_push, srv_corpus, srv_template,
                             srv_window);
        if (trn->parsed())
            return cmd_train(trn_mode, trn_base, trn_endpoint, trn_hash, trn_cfg, trn_train, trn_val, trn_out,
                             trn_epochs, trn_batch, trn_lr, trn_mask, trn_trunc, trn_alpha_mode, trn_alpha_init,
                             trn_bits, trn_seed, trn_curves, trn_template, trn_general, trn_verbose,
                             trn_train_base, trn_base_lr);
        if (evl->parsed())
            return cmd_eval(evl_bundle, evl_qa, evl_alpha, evl_template, evl_max_new, evl_bits, evl_json, evl_csv,
                            evl_mask, evl_val);
        if (rep->parsed())
            return cmd_alpha_report(rep_bundle, rep_val, rep_alphas, rep_tol, rep_mask, rep_template, rep_csv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
