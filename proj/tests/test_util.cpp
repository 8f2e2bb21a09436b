#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "carrygpt/corpus.hpp"
#include "carrygpt/rng.hpp"
#include "carrygpt/sha256.hpp"
#include "testutil.hpp"

using namespace carrygpt;

TEST_CASE("sha256 matches the reference vectors") {
    CHECK(Sha256::hex(Sha256::hash("")) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(Sha256::hex(Sha256::hash("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(Sha256::hex(Sha256::hash("abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq")) ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
    // block-boundary lengths
    const std::string a55(55, 'a'), a56(56, 'a'), a64(64, 'a'), a65(65, 'a');
    CHECK(Sha256::hex(Sha256::hash(a55)) == "9f4390f8d30c2dd92ec9f095b65e2b9ae9b0a925a5258e241c9f1e910f734318");
    CHECK(Sha256::hex(Sha256::hash(a56)) == "b35439a4ac6f0948b6d6f9e3c6af0f5f590ce20f1bde7090ef7970686ec6738a");
    CHECK(Sha256::hex(Sha256::hash(a64)) == "ffe054fe7ae0cb6dc65c3af9b61d5209f439851db43d0ba5997337df154668eb");
    CHECK(Sha256::hex(Sha256::hash(a65)) == "635361c48bb9eab14198e76ea8ab7f1a41685d6ad62aa9146d301d4f17eb0ae0");
}

TEST_CASE("streaming updates equal one-shot hashing") {
    Rng rng(1);
    std::string data(1 << 15, '\0');
    for (auto& c : data) c = static_cast<char>(rng.below(256));
    Sha256 h;
    std::size_t off = 0;
    while (off < data.size()) {
        const std::size_t take = std::min<std::size_t>(1 + rng.below(700), data.size() - off);
        h.update(data.data() + off, take);
        off += take;
    }
    CHECK(h.digest() == Sha256::hash(data));
}

TEST_CASE("file hashing matches in-memory hashing") {
    testutil::TempDir tmp("sha");
    const std::string payload = "carrygpt model bytes\n";
    corpus::write_text_file(tmp.path("f.bin"), payload);
    CHECK(Sha256::hash_file(tmp.path("f.bin")) == Sha256::hash(payload));
}

TEST_CASE("rng streams are reproducible and well distributed") {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng r(7);
    double mean = 0, var = 0;
    const int n = 20000;
    std::vector<double> xs;
    for (int i = 0; i < n; ++i) xs.push_back(r.normal());
    for (double x : xs) mean += x;
    mean /= n;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.05);

    // permutation is a bijection
    Rng p(13);
    const auto perm = p.permutation(257);
    std::vector<bool> seen(257, false);
    for (std::size_t idx : perm) {
        CHECK_FALSE(seen[idx]);
        seen[idx] = true;
    }
}

TEST_CASE("forked streams differ from the parent") {
    Rng r(99);
    Rng child = r.fork(1);
    Rng r2(99);
    bool any_diff = false;
    for (int i = 0; i < 16; ++i) any_diff = any_diff || child.next_u64() != r2.next_u64();
    CHECK(any_diff);
}

TEST_CASE("mix is stateless and sensitive to every argument") {
    CHECK(Rng::mix(1, 2, 3) == Rng::mix(1, 2, 3));
    CHECK(Rng::mix(1, 2, 3) != Rng::mix(1, 2, 4));
    CHECK(Rng::mix(1, 2, 3) != Rng::mix(2, 2, 3));
    CHECK(Rng::mix(1, 2, 3) != Rng::mix(1, 3, 3));
}

TEST_CASE("bundled corpora are deterministic per seed") {
    CHECK(corpus::pretrain_text(5000, 9) == corpus::pretrain_text(5000, 9));
    CHECK(corpus::pretrain_text(5000, 9) != corpus::pretrain_text(5000, 10));
    const auto qa_a = corpus::arithmetic_qa(50, 3, 19);
    const auto qa_b = corpus::arithmetic_qa(50, 3, 19);
    REQUIRE(qa_a.size() == qa_b.size());
    for (std::size_t i = 0; i < qa_a.size(); ++i) {
        CHECK(qa_a[i].question == qa_b[i].question);
        CHECK(qa_a[i].answer == qa_b[i].answer);
    }
    // answers are consistent with the questions
    for (const auto& item : qa_a) {
        const auto plus = item.question.find('+');
        REQUIRE(plus != std::string::npos);
        const int a = std::stoi(item.question.substr(0, plus));
        const int b = std::stoi(item.question.substr(plus + 1));
        CHECK(std::to_string(a + b) == item.answer);
    }
}
