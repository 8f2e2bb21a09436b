#include <catch2/catch_amalgamated.hpp>

#include <thread>

#include "carrygpt/corpus.hpp"
#include "carrygpt/splitnode.hpp"
#include "testutil.hpp"

using namespace carrygpt;

namespace {

BaseModel split_base(std::uint64_t seed = 91) {
    BaseConfig cfg;
    cfg.dim = 16;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.max_seq = 64;
    cfg.seed = seed;
    BaseModel m = BaseModel::init(cfg);
    m.freeze();
    return m;
}

std::array<std::uint8_t, 32> fake_hash(std::uint8_t fill = 7) {
    std::array<std::uint8_t, 32> h{};
    h.fill(fill);
    return h;
}

struct ServerThread {
    EmbeddingServer server;
    std::thread thread;
    int exit_code = -1;

    ServerThread(BaseModel model, std::array<std::uint8_t, 32> hash, ServeOptions opt = {})
        : server(std::move(model), hash, std::move(opt)) {
        thread = std::thread([this] { exit_code = server.run(); });
    }
    ~ServerThread() { stop(); }
    void stop() {
        server.request_stop();
        if (thread.joinable()) thread.join();
    }
    std::string endpoint() const { return "127.0.0.1:" + std::to_string(server.port()); }
};

SessionConfig session_for(const ServerThread& st, const BaseModel& base, std::vector<int> depths, int bits) {
    SessionConfig cfg;
    cfg.endpoint = st.endpoint();
    cfg.depths = std::move(depths);
    cfg.bits = bits;
    cfg.base_model_hash = st.server.model_hash();
    cfg.d_base = base.cfg.dim;
    return cfg;
}

std::vector<TokenSequence> qa_train_set(int count, std::uint64_t seed) {
    return corpus::qa_sequences(corpus::arithmetic_qa(count, seed, 9), "Q: {question} A:", 48);
}

} // namespace

TEST_CASE("handshake accepts a matching hash and rejects mismatches") {
    ServeOptions opt;
    opt.quiet = true;
    const BaseModel base = split_base();
    ServerThread st(split_base(), fake_hash(), opt);

    const SessionConfig good = session_for(st, base, {0, base.cfg.layers}, 4);
    const TokenSequence seq{{1, 2, 3, 4}};

    // one client at a time: run the rejected sessions first, each returns
    // the connection to the accept loop
    SessionConfig bad = good;
    bad.base_model_hash = fake_hash(9);
    {
        RemoteTapSource rejected(bad);
        CHECK_THROWS_AS(rejected.fetch(seq), HandshakeError);
    }
    SessionConfig wrong_version = good;
    wrong_version.proto_version = kProtoVersion + 1;
    {
        RemoteTapSource rejected(wrong_version);
        CHECK_THROWS_AS(rejected.fetch(seq), HandshakeError);
    }
    SessionConfig bad_depth = good;
    bad_depth.depths = {base.cfg.layers + 1};
    {
        RemoteTapSource rejected(bad_depth);
        CHECK_THROWS_AS(rejected.fetch(seq), HandshakeError);
    }

    RemoteTapSource source(good);
    const TapSet taps = source.fetch(seq); // implies accepted handshake
    CHECK(taps.taps.at("main").size() == 2);
    source.end_session();
}

TEST_CASE("a tap request returns one block per depth at the requested bits") {
    ServeOptions opt;
    opt.quiet = true;
    const BaseModel base = split_base();
    ServerThread st(split_base(), fake_hash(), opt);
    RemoteTapSource source(session_for(st, base, {0, base.cfg.layers}, 4));
    const TokenSequence seq{{10, 20, 30}};
    const TapSet remote = source.fetch(seq);
    const TapSet local = local_taps(base, "main", seq, {0, base.cfg.layers}, 4);
    REQUIRE(remote.taps.at("main").size() == 2);
    for (int depth : {0, base.cfg.layers}) {
        const Tensor& r = remote.at("main", depth);
        const Tensor& l = local.at("main", depth);
        REQUIRE(r.numel() == l.numel());
        for (std::size_t i = 0; i < r.numel(); ++i) CHECK(r.data()[i] == l.data()[i]);
    }
}

TEST_CASE("split training equals local training bit-exactly") {
    const BaseModel base = split_base();
    const auto train = qa_train_set(24, 5);
    const auto val = qa_train_set(6, 6);

    for (int bits : {0, 4}) {
        CarryOnConfig cfg;
        cfg.d_carry = base.cfg.dim;
        cfg.layers = 1;
        cfg.heads = 2;
        cfg.ffn.hidden = 32;
        cfg.bases = {CarryOnConfig::ref_of(base, "main")};
        cfg.head.reuse_base = true;
        cfg.alpha_init = 0.5;

        TrainOptions topt;
        topt.epochs = 2;
        topt.batch_size = 8;
        topt.mask_before = 4;
        topt.lr_peak = Real(1e-3);
        topt.alpha_mode = AlphaMode::grid;
        topt.head_base = &base;
        topt.seed = 23;

        CarryOnModel local_model = CarryOnModel::init(cfg, 77);
        LocalTapSource local_source(base, "main", local_model.needed_depths(), bits);
        train_carryon(local_model, local_source, train, val, topt);

        ServeOptions sopt;
        sopt.quiet = true;
        ServerThread st(split_base(), fake_hash(), sopt);
        CarryOnModel remote_model = CarryOnModel::init(cfg, 77);
        const TrainResult remote_result =
            train_remote(remote_model, session_for(st, base, remote_model.needed_depths(), bits), train, val, topt);
        st.thread.join(); // END should stop the server loop
        st.thread = std::thread([] {});
        CHECK(st.exit_code == 0);

        INFO("bits=" << bits);
        CHECK(local_model.params.flatten_values() == remote_model.params.flatten_values());
        CHECK(local_model.alpha == remote_model.alpha);
        CHECK(remote_result.source_bytes > 0);
    }
}

TEST_CASE("client survives a server restart and resumes at the next batch id") {
    const BaseModel base = split_base();
    std::vector<TokenSequence> seqs = qa_train_set(10, 9);

    ServeOptions opt;
    opt.quiet = true;
    auto first = std::make_unique<ServerThread>(split_base(), fake_hash(), opt);
    const std::uint16_t port = first->server.port();

    SessionConfig session = session_for(*first, base, {base.cfg.layers}, 4);
    session.max_reconnects = 5;
    session.backoff_start_ms = 50;
    RemoteTapSource source(session);

    std::vector<TapSet> collected;
    for (int i = 0; i < 4; ++i) collected.push_back(source.fetch(seqs[static_cast<std::size_t>(i)].inputs()));

    first->stop(); // hard stop mid-session
    first.reset();

    ServeOptions opt2;
    opt2.quiet = true;
    opt2.bind = "127.0.0.1:" + std::to_string(port);
    ServerThread second(split_base(), fake_hash(), opt2);

    for (int i = 4; i < 10; ++i) collected.push_back(source.fetch(seqs[static_cast<std::size_t>(i)].inputs()));
    source.end_session();

    // every batch applied exactly once, bit-identical to the local bridge
    for (int i = 0; i < 10; ++i) {
        const TapSet local = local_taps(base, "main", seqs[static_cast<std::size_t>(i)].inputs(),
                                        {base.cfg.layers}, 4);
        const Tensor& a = collected[static_cast<std::size_t>(i)].at("main", base.cfg.layers);
        const Tensor& b = local.at("main", base.cfg.layers);
        REQUIRE(a.numel() == b.numel());
        for (std::size_t j = 0; j < a.numel(); ++j) CHECK(a.data()[j] == b.data()[j]);
    }
}

TEST_CASE("push mode streams the server corpus in order") {
    const BaseModel base = split_base();
    ServeOptions opt;
    opt.quiet = true;
    opt.push = true;
    opt.push_corpus = qa_train_set(5, 13);
    ServerThread st(split_base(), fake_hash(), opt);

    SessionConfig session = session_for(st, base, {base.cfg.layers}, 4);
    std::vector<std::uint64_t> ids;
    std::vector<TokenSequence> seqs;
    consume_push_stream(session, [&](std::uint64_t id, const TokenSequence& seq, const TapSet& taps) {
        ids.push_back(id);
        seqs.push_back(seq);
        CHECK(taps.taps.at("main").count(base.cfg.layers) == 1);
    });
    st.thread.join();
    st.thread = std::thread([] {});
    CHECK(st.exit_code == 0);
    REQUIRE(ids.size() == 5);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        CHECK(ids[i] == i);
        CHECK(seqs[i].ids == opt.push_corpus[i].ids);
    }
}

TEST_CASE("bytes per step shrink with coarser quantization") {
    const BaseModel base = split_base();
    const TokenSequence seq{{1, 2, 3, 4, 5, 6, 7, 8}};
    std::map<int, std::uint64_t> bytes_at;
    for (int bits : {0, 4, 8}) {
        ServeOptions opt;
        opt.quiet = true;
        ServerThread st(split_base(), fake_hash(), opt);
        RemoteTapSource source(session_for(st, base, {base.cfg.layers}, bits));
        source.fetch(seq);
        bytes_at[bits] = source.bytes_transferred();
        source.end_session();
        st.thread.join();
        st.thread = std::thread([] {});
    }
    CHECK(bytes_at[4] < bytes_at[8]);
    CHECK(bytes_at[8] < bytes_at[0]);
}

TEST_CASE("garbage frames abort the connection but not the server") {
    ServeOptions opt;
    opt.quiet = true;
    const BaseModel base = split_base();
    ServerThread st(split_base(), fake_hash(), opt);

    Rng rng(31);
    for (int round = 0; round < 50; ++round) {
        net::Socket sock = net::connect_to(net::Addr::parse(st.endpoint()));
        std::vector<std::uint8_t> junk(1 + rng.below(64));
        for (auto& b : junk) b = static_cast<std::uint8_t>(rng.below(256));
        try {
            sock.send_all(junk.data(), junk.size());
        } catch (const NetError&) {
            // server may already have aborted us
        }
        sock.close();
    }

    // the server still answers a well-formed client afterwards
    RemoteTapSource source(session_for(st, base, {0}, 2));
    const TapSet taps = source.fetch(TokenSequence{{5, 6, 7}});
    CHECK(taps.taps.at("main").count(0) == 1);
}
