#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pfnlab/model.hpp"

using namespace pfnlab;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.d_model = 32;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_ff = 48;
    c.max_features = 6;
    c.max_classes = 4;
    return c;
}

ContextBatch random_batch(TaskType task, int64_t n_tr, int64_t n_te, int64_t m, uint64_t seed,
                          int64_t n_classes = 3) {
    Rng rng(seed, hash_str("test_batch"));
    ContextBatch b;
    b.task_type = task;
    b.x_train = Tensor({n_tr, m});
    b.x_test = Tensor({n_te, m});
    for (auto& v : b.x_train.data) v = rng.normal_f();
    for (auto& v : b.x_test.data) v = rng.normal_f();
    if (task == TaskType::regression) {
        b.y_train_reg.resize(size_t(n_tr));
        for (auto& v : b.y_train_reg) v = rng.normal_f() * 2.0f + 1.0f;
    } else {
        b.active_classes = n_classes;
        b.y_train_cls.resize(size_t(n_tr));
        for (auto& v : b.y_train_cls) v = rng.below(n_classes);
    }
    return b;
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("init_params: deterministic, gamma ones, expected shapes") {
    const ModelConfig cfg = small_config();
    const PFNParams a = init_params(cfg, 9);
    const PFNParams b = init_params(cfg, 9);
    REQUIRE(a.store.names() == b.store.names());
    for (const auto& name : a.store.names())
        CHECK(a.store.at(name).tensor.data == b.store.at(name).tensor.data);

    const PFNParams c = init_params(cfg, 10);
    CHECK(a.store.at("layer0.attn.wq").tensor.data != c.store.at("layer0.attn.wq").tensor.data);

    for (float v : a.store.at("layer1.ln2.gamma").tensor.data) CHECK(v == 1.0f);
    for (float v : a.store.at("head.b1").tensor.data) CHECK(v == 0.0f);
    CHECK(a.store.at("layer0.attn.wq").tensor.shape == std::vector<int64_t>({32, 32}));
    CHECK(a.store.at("feat_emb.W").tensor.shape == std::vector<int64_t>({6, 32}));
    CHECK(a.store.at("head.W2").tensor.shape == std::vector<int64_t>({32, 5}));
}

TEST_CASE("embed_context: zero row with zero target leaves only the target-side embedding") {
    const ModelConfig cfg = small_config();
    PFNParams params = init_params(cfg, 3);
    ContextBatch b;
    b.task_type = TaskType::regression;
    b.x_train = Tensor({1, 4});  // all-zero row
    b.x_test = Tensor({1, 4});   // all-zero query
    b.y_train_reg = {0.0f};
    const Tensor tokens = embed_context(b, params);
    REQUIRE(tokens.rows() == 2);
    // zero features + zero z-scored target: train token is exactly zero
    for (int64_t j = 0; j < cfg.d_model; ++j) CHECK(tokens.at(0, j) == 0.0f);
    // test token is exactly the learned missing-target vector
    const Tensor& miss = params.store.at("target_emb.missing").tensor;
    for (int64_t j = 0; j < cfg.d_model; ++j) CHECK(tokens.at(1, j) == miss.at(j));
}

TEST_CASE("embed_context: identical rows with identical targets embed identically") {
    const ModelConfig cfg = small_config();
    const PFNParams params = init_params(cfg, 4);
    ContextBatch b = random_batch(TaskType::classification, 6, 0, 4, 77, 3);
    for (int64_t j = 0; j < 4; ++j) b.x_train.at(3, j) = b.x_train.at(1, j);
    b.y_train_cls[3] = b.y_train_cls[1];
    const Tensor tokens = embed_context(b, params);
    for (int64_t j = 0; j < cfg.d_model; ++j) CHECK(tokens.at(3, j) == tokens.at(1, j));
}

TEST_CASE("forward: empty query set gives empty predictions of the right shape") {
    const PFNParams params = init_params(small_config(), 5);
    const ContextBatch b = random_batch(TaskType::regression, 8, 0, 4, 5);
    const Predictions p = forward(params, b);
    CHECK(p.values.numel() == 0);

    const ContextBatch c = random_batch(TaskType::classification, 8, 0, 4, 6);
    const Predictions pc = forward(params, c);
    CHECK(pc.logits.rows() == 0);
    CHECK(pc.logits.cols() == small_config().max_classes);
}

TEST_CASE("forward: duplicate test rows predict identically") {
    const PFNParams params = init_params(small_config(), 6);
    ContextBatch b = random_batch(TaskType::regression, 10, 4, 5, 8);
    for (int64_t j = 0; j < 5; ++j) b.x_test.at(2, j) = b.x_test.at(0, j);
    const Predictions p = forward(params, b);
    CHECK(std::abs(p.values.at(2) - p.values.at(0)) < 1e-6);
}

TEST_CASE("forward: single train row collapses regression onto its target") {
    const PFNParams params = init_params(small_config(), 7);
    ContextBatch b = random_batch(TaskType::regression, 1, 3, 4, 9);
    b.y_train_reg = {2.75f};
    const Predictions p = forward(params, b);
    for (int64_t i = 0; i < 3; ++i) CHECK(p.values.at(i) == doctest::Approx(2.75f).epsilon(1e-6));
}

TEST_CASE("forward: empty train context is a contract error") {
    const PFNParams params = init_params(small_config(), 7);
    ContextBatch b = random_batch(TaskType::regression, 1, 2, 4, 9);
    b.x_train = Tensor({0, 4});
    b.y_train_reg.clear();
    CHECK_THROWS_AS(forward(params, b), ContractError);
}

TEST_CASE("forward: feature overflow is a capacity error") {
    const PFNParams params = init_params(small_config(), 7);
    const ContextBatch b = random_batch(TaskType::regression, 6, 2, 7, 9);  // 7 > max_features=6
    CHECK_THROWS_AS(forward(params, b), ShapeError);
}

TEST_CASE("forward_with_attention: record contract") {
    const ModelConfig cfg = small_config();
    const PFNParams params = init_params(cfg, 11);
    const ContextBatch b = random_batch(TaskType::classification, 12, 5, 4, 10, 3);
    const auto [pred, rec] = forward_with_attention(params, b);

    CHECK(rec.weights.shape == std::vector<int64_t>({5, 12, 2}));
    CHECK(rec.max_test_key_weight == 0.0f);  // exact zeros on masked test keys
    for (int64_t i = 0; i < rec.n_test; ++i)
        for (int64_t h = 0; h < rec.n_heads; ++h) {
            double sum = 0.0;
            for (int64_t j = 0; j < rec.n_train; ++j) {
                CHECK(rec.weights.at(i, j, h) >= 0.0f);
                sum += double(rec.weights.at(i, j, h));
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }

    // masked full-key path must agree with the restricted-key fast path
    // (up to GEMM blocking noise from the different key-panel widths)
    const Predictions plain = forward(params, b);
    CHECK(max_abs_diff(plain.probabilities(), pred.probabilities()) < 1e-5);
}

TEST_CASE("forward: context permutation invariance") {
    const PFNParams params = init_params(small_config(), 12);
    ContextBatch b = random_batch(TaskType::regression, 14, 6, 5, 11);
    const Predictions base = forward(params, b);

    Rng rng(99);
    const auto perm = rng.permutation(14);
    ContextBatch shuffled = b;
    for (int64_t i = 0; i < 14; ++i) {
        for (int64_t j = 0; j < 5; ++j) shuffled.x_train.at(i, j) = b.x_train.at(perm[size_t(i)], j);
        shuffled.y_train_reg[size_t(i)] = b.y_train_reg[size_t(perm[size_t(i)])];
    }
    const Predictions after = forward(params, shuffled);
    CHECK(max_abs_diff(base.values, after.values) < 1e-4);
}

TEST_CASE("forward: test rows are isolated from each other") {
    const PFNParams params = init_params(small_config(), 13);
    ContextBatch b = random_batch(TaskType::regression, 10, 6, 4, 12);
    const Predictions full = forward(params, b);

    // drop all but test row 2
    ContextBatch solo = b;
    solo.x_test = Tensor({1, 4});
    for (int64_t j = 0; j < 4; ++j) solo.x_test.at(0, j) = b.x_test.at(2, j);
    const Predictions one = forward(params, solo);
    CHECK(std::abs(one.values.at(0) - full.values.at(2)) < 1e-5);

    // permute test rows
    ContextBatch permuted = b;
    for (int64_t j = 0; j < 4; ++j) {
        permuted.x_test.at(0, j) = b.x_test.at(5, j);
        permuted.x_test.at(5, j) = b.x_test.at(0, j);
    }
    const Predictions swapped = forward(params, permuted);
    CHECK(std::abs(swapped.values.at(5) - full.values.at(0)) < 1e-5);
    CHECK(std::abs(swapped.values.at(0) - full.values.at(5)) < 1e-5);
}

TEST_CASE("forward: inactive class probability mass is exactly zero") {
    const PFNParams params = init_params(small_config(), 14);
    const ContextBatch b = random_batch(TaskType::classification, 10, 4, 4, 13, 3);
    const Predictions p = forward(params, b);
    REQUIRE(p.logits.cols() == 4);  // max_classes
    const Tensor probs = p.probabilities();
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(p.logits.at(i, 3) == -std::numeric_limits<float>::infinity());
        CHECK(probs.at(i, 3) == 0.0f);
        double sum = 0.0;
        for (int64_t c = 0; c < 3; ++c) sum += double(probs.at(i, c));
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("attach_feature_embeddings: untied init reproduces the base model") {
    const PFNParams base = init_params(small_config(), 15);
    const ContextBatch b = random_batch(TaskType::regression, 12, 5, 4, 14);
    const Predictions before = forward(base, b);

    const PFNParams untied = attach_feature_embeddings(base, EmbeddingKind::untied_linear, b.x_train, 0);
    const Predictions after = forward(untied, b);
    CHECK(max_abs_diff(before.values, after.values) < 1e-6);

    CHECK(untied.store.at("feat_emb.untied.W").trainable);
    CHECK(untied.store.at("feat_emb.untied.bias").trainable);
    CHECK_THROWS_AS(attach_feature_embeddings(untied, EmbeddingKind::untied_linear, b.x_train, 0),
                    ContractError);
}

TEST_CASE("attach_feature_embeddings: piecewise init reproduces the base model") {
    const PFNParams base = init_params(small_config(), 16);
    ContextBatch b = random_batch(TaskType::regression, 30, 8, 5, 15);
    const Predictions before = forward(base, b);

    const PFNParams pw = attach_feature_embeddings(base, EmbeddingKind::piecewise_linear, b.x_train, 4);
    const Predictions after = forward(pw, b);
    CHECK(max_abs_diff(before.values, after.values) < 1e-5);
    CHECK(pw.pw_edges.size() == 5);
}

TEST_CASE("fit_quantile_edges: uniform sample quartiles and constant fallback") {
    std::vector<float> uniform(101);
    for (size_t i = 0; i < uniform.size(); ++i) uniform[i] = float(i) / 100.0f;
    const auto edges = fit_quantile_edges(uniform, 4);
    REQUIRE(edges.size() == 5);
    CHECK(edges[0] == doctest::Approx(0.0));
    CHECK(edges[1] == doctest::Approx(0.25));
    CHECK(edges[2] == doctest::Approx(0.5));
    CHECK(edges[3] == doctest::Approx(0.75));
    CHECK(edges[4] == doctest::Approx(1.0));

    const std::vector<float> constant(20, 3.5f);
    const auto fb = fit_quantile_edges(constant, 4);
    REQUIRE(fb.size() == 2);
    CHECK(fb[0] == 3.5f);
    CHECK(fb[1] == 4.5f);
}

TEST_CASE("piecewise_basis: continuous at bin boundaries and represents identity") {
    const std::vector<float> edges = {-1.0f, 0.0f, 0.5f, 2.0f};
    std::vector<float> lo(3), hi(3);
    for (float boundary : {0.0f, 0.5f}) {
        piecewise_basis(std::nextafter(boundary, -10.0f), edges, lo);
        piecewise_basis(std::nextafter(boundary, 10.0f), edges, hi);
        for (int k = 0; k < 3; ++k) CHECK(std::abs(lo[size_t(k)] - hi[size_t(k)]) < 1e-6);
    }
    // sum_k p_k * width_k == v - t0, including outside the fitted range
    for (float v : {-3.0f, -1.0f, 0.25f, 1.9f, 5.0f}) {
        std::vector<float> p(3);
        piecewise_basis(v, edges, p);
        double s = double(edges[0]);
        for (int k = 0; k < 3; ++k) s += double(p[size_t(k)]) * (double(edges[size_t(k + 1)]) - double(edges[size_t(k)]));
        CHECK(s == doctest::Approx(double(v)).epsilon(1e-6));
    }
}

TEST_CASE("checkpoint: save -> load -> save is bit-exact") {
    PFNParams params = init_params(small_config(), 17);
    params.store.at("layer0.attn.wk").trainable = false;  // exercise flag round trip

    const std::string p1 = (std::filesystem::temp_directory_path() / "pfnlab_test_ckpt1.pfnckpt").string();
    const std::string p2 = (std::filesystem::temp_directory_path() / "pfnlab_test_ckpt2.pfnckpt").string();
    save_checkpoint(p1, params, R"({"seed": 17, "pretrain_steps": 0, "prior_config_hash": "0xabc"})");

    std::string meta;
    const PFNParams loaded = load_checkpoint(p1, &meta);
    CHECK(loaded.config == params.config);
    CHECK(loaded.store.names() == params.store.names());
    CHECK_FALSE(loaded.store.at("layer0.attn.wk").trainable);
    for (const auto& name : params.store.names())
        CHECK(loaded.store.at(name).tensor.data == params.store.at(name).tensor.data);
    CHECK(meta.find("\"seed\":17") != std::string::npos);

    save_checkpoint(p2, loaded, R"({"seed": 17, "pretrain_steps": 0, "prior_config_hash": "0xabc"})");
    CHECK(read_file(p1) == read_file(p2));
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
}

TEST_CASE("checkpoint: piecewise edges survive the round trip") {
    const PFNParams base = init_params(small_config(), 18);
    ContextBatch b = random_batch(TaskType::regression, 25, 4, 3, 19);
    const PFNParams pw = attach_feature_embeddings(base, EmbeddingKind::piecewise_linear, b.x_train, 4);

    const std::string p = (std::filesystem::temp_directory_path() / "pfnlab_test_ckpt3.pfnckpt").string();
    save_checkpoint(p, pw);
    const PFNParams loaded = load_checkpoint(p);
    REQUIRE(loaded.pw_edges.size() == pw.pw_edges.size());
    for (size_t j = 0; j < pw.pw_edges.size(); ++j) CHECK(loaded.pw_edges[j] == pw.pw_edges[j]);
    const Predictions a = forward(pw, b);
    const Predictions c = forward(loaded, b);
    CHECK(a.values.data == c.values.data);
    std::filesystem::remove(p);
}

TEST_CASE("grad_check: tiny attention models at h=1e-3 stay under 1e-4") {
    ModelConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.max_features = 4;
    cfg.max_classes = 3;

    for (uint64_t trial = 0; trial < 4; ++trial) {
        const TaskType task = trial % 2 == 0 ? TaskType::regression : TaskType::classification;
        const ContextBatch b = random_batch(task, 6, 3, 3, 100 + trial, 3);
        PFNParamsT<double> params = init_params(cfg, 200 + trial).cast<double>();

        std::vector<float> target_reg;
        std::vector<int64_t> target_cls;
        Rng trng(300 + trial);
        for (int64_t i = 0; i < 3; ++i) {
            target_reg.push_back(trng.normal_f());
            target_cls.push_back(trng.below(3));
        }
        auto build = [&](GraphT<double>& g, const ParamStoreT<double>& s) {
            PFNParamsT<double> bound;
            bound.config = params.config;
            bound.store = s;
            return build_loss(g, bound, b, target_reg, target_cls);
        };
        const double err = grad_check<double>(build, params.store, 1e-3, 4, trial);
        CHECK(err < 1e-4);
    }
}
