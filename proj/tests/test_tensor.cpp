#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "eelo/errors.hpp"
#include "eelo/rng.hpp"
#include "eelo/tensor.hpp"

using namespace eelo;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("eelo_tensor_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

TensorStore sample_store(uint64_t seed) {
    std::mt19937_64 gen(seed);
    TensorStore store;
    auto a = make_tensor({3, 5});
    auto b = make_tensor({7});
    for (auto& v : a.data) {
        v = static_cast<float>(uniform01(gen) - 0.5);
    }
    for (auto& v : b.data) {
        v = static_cast<float>(uniform01(gen) - 0.5);
    }
    store.add("layers.0.w_gate", std::move(a));
    store.add("final_norm", std::move(b));
    return store;
}

} // namespace

TEST_CASE("save/load round trip preserves tensors bit-for-bit") {
    TempDir tmp;
    auto store = sample_store(1);
    store.save(tmp.path);
    auto loaded = TensorStore::load(tmp.path);

    CHECK(loaded.names() == store.names());
    for (const auto& name : store.names()) {
        CHECK(loaded.get(name).shape == store.get(name).shape);
        CHECK(loaded.get(name).data == store.get(name).data);
    }
    CHECK(fingerprint(loaded) == fingerprint(store));
}

TEST_CASE("fingerprint is sensitive to values and names") {
    auto a = sample_store(1);
    auto b = sample_store(1);
    CHECK(fingerprint(a) == fingerprint(b));

    b.get("final_norm").data[0] += 1.0f;
    CHECK(fingerprint(a) != fingerprint(b));

    auto c = sample_store(2);
    CHECK(fingerprint(a) != fingerprint(c));
}

TEST_CASE("missing tensor file is a distinct error") {
    TempDir tmp;
    sample_store(1).save(tmp.path);
    fs::remove(tmp.path / "final_norm.bin");
    try {
        TensorStore::load(tmp.path);
        FAIL("expected StoreError");
    } catch (const StoreError& e) {
        CHECK(e.code() == StoreErrorCode::missing_tensor);
    }
}

TEST_CASE("truncated tensor file is a corrupt-file error") {
    TempDir tmp;
    sample_store(1).save(tmp.path);
    const auto bin = tmp.path / "layers.0.w_gate.bin";
    const auto full = fs::file_size(bin);
    fs::resize_file(bin, full - sizeof(float)); // drop exactly one value
    try {
        TensorStore::load(tmp.path);
        FAIL("expected StoreError");
    } catch (const StoreError& e) {
        CHECK(e.code() == StoreErrorCode::corrupt_file);
    }
}

TEST_CASE("malformed manifests are bad-manifest errors") {
    TempDir tmp;
    sample_store(1).save(tmp.path);

    SUBCASE("unparsable json") {
        std::ofstream(tmp.path / "manifest.json", std::ios::trunc) << "{nope";
    }
    SUBCASE("wrong dtype") {
        std::ifstream in(tmp.path / "manifest.json");
        std::string text((std::istreambuf_iterator<char>(in)), {});
        in.close();
        auto pos = text.find("f32");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, 3, "f64");
        std::ofstream(tmp.path / "manifest.json", std::ios::trunc) << text;
    }
    SUBCASE("manifest absent") {
        fs::remove(tmp.path / "manifest.json");
    }

    try {
        TensorStore::load(tmp.path);
        FAIL("expected StoreError");
    } catch (const StoreError& e) {
        CHECK(e.code() == StoreErrorCode::bad_manifest);
    }
}

TEST_CASE("shape-checked lookup") {
    auto store = sample_store(1);
    CHECK_NOTHROW(store.get("layers.0.w_gate", {3, 5}));
    try {
        store.get("layers.0.w_gate", {5, 3});
        FAIL("expected StoreError");
    } catch (const StoreError& e) {
        CHECK(e.code() == StoreErrorCode::shape_mismatch);
    }
    try {
        store.get("absent");
        FAIL("expected StoreError");
    } catch (const StoreError& e) {
        CHECK(e.code() == StoreErrorCode::missing_tensor);
    }
}

TEST_CASE("duplicate names and size mismatches are rejected") {
    TensorStore store;
    store.add("t", make_tensor({2, 2}));
    CHECK_THROWS_AS(store.add("t", make_tensor({2, 2})), InputError);

    Tensor bad;
    bad.shape = {4};
    bad.data = {1.0f};
    CHECK_THROWS_AS(store.add("bad", std::move(bad)), InputError);
}

TEST_CASE("store errors convert to input errors at the boundary") {
    // exit-code mapping relies on this inheritance
    auto store = sample_store(1);
    CHECK_THROWS_AS(store.get("absent"), InputError);
}
