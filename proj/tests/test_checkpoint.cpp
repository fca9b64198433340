#include <cstdio>
#include <map>
#include <string>

#include "doctest.h"
#include "ldit/checkpoint.hpp"
#include "ldit/errors.hpp"
#include "ldit/io.hpp"
#include "ldit/layers.hpp"
#include "ldit/rng.hpp"
#include "ldit/tensor.hpp"

using namespace ldit;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/ldit_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

// Two named tensors standing in for a small model's parameter group.
struct Blob {
    Tensor<float> w{Shape{3, 1, 2, 2}};
    Tensor<float> b{Shape::vec(3)};
    ParamList<float> params() {
        return {{"head.w", &w}, {"head.b", &b}};
    }
};

}  // namespace

TEST_SUITE("checkpoint") {

    TEST_CASE("crc32 reference vector") {
        const std::string msg = "123456789";
        CHECK(io::crc32(msg) == 0xCBF43926u);
        // incremental evaluation must match one-shot
        std::uint32_t crc = io::crc32_update(msg.data(), 4);
        crc = io::crc32_update(msg.data() + 4, 5, crc);
        CHECK(crc == 0xCBF43926u);
    }

    TEST_CASE("text header round trip") {
        std::string hdr;
        io::put_line(hdr, "alpha", "1 2 3");
        io::put_line(hdr, "beta", io::fmt_double(0.1));
        auto lines = io::parse_lines(hdr);
        REQUIRE(lines.size() == 2);
        CHECK(lines[0].first == "alpha");
        CHECK(lines[0].second == "1 2 3");
        CHECK(io::parse_double(lines[1].second, "beta") == 0.1);
        CHECK_THROWS_AS(io::parse_lines("no separator here\n"), format_error);
        CHECK_THROWS_AS(io::parse_int("12x", "k"), format_error);
    }

    TEST_CASE("save then load restores parameters bit-exactly") {
        TempFile f("ckpt_roundtrip.cclt");
        Blob src;
        Rng rng(31);
        fill_randn(src.w, rng);
        fill_randn(src.b, rng);

        ckpt::save(f.path, "vae-source", {{"widths", "2 3 4"}, {"lr", "0.001"}}, src.params());

        auto file = ckpt::load(f.path);
        CHECK(file.stage == "vae-source");
        CHECK(ckpt::field(file, "widths") == "2 3 4");
        CHECK(ckpt::field(file, "lr") == "0.001");
        CHECK_THROWS_AS(ckpt::field(file, "missing_key"), format_error);

        Blob dst;
        dst.w.data.setZero();
        dst.b.data.setZero();
        ckpt::restore(file, dst.params());
        CHECK((dst.w.data == src.w.data).all());
        CHECK((dst.b.data == src.b.data).all());

        // single-tensor access by name
        Tensor<float> w = file.tensor("head.w");
        CHECK((w.data == src.w.data).all());
        CHECK(file.find("nope") == nullptr);
    }

    TEST_CASE("stage guard") {
        TempFile f("ckpt_stage.cclt");
        Blob src;
        ckpt::save(f.path, "denoiser", {}, src.params());
        auto file = ckpt::load(f.path);
        CHECK_NOTHROW(ckpt::expect_stage(file, "denoiser", f.path));
        CHECK_THROWS_AS(ckpt::expect_stage(file, "controlnet", f.path), format_error);
    }

    TEST_CASE("corruption and truncation are rejected") {
        TempFile f("ckpt_corrupt.cclt");
        Blob src;
        Rng rng(32);
        fill_randn(src.w, rng);
        ckpt::save(f.path, "denoiser", {}, src.params());
        const std::string good = io::read_file(f.path);

        // flip one payload byte (last byte of the file)
        std::string bad = good;
        bad.back() = char(bad.back() ^ 0x40);
        io::write_file(f.path, bad);
        CHECK_THROWS_WITH_AS(ckpt::load(f.path), doctest::Contains("checksum"), format_error);

        // truncate the payload
        io::write_file(f.path, good.substr(0, good.size() - 3));
        CHECK_THROWS_AS(ckpt::load(f.path), format_error);

        // trailing garbage after the payload
        io::write_file(f.path, good + "x");
        CHECK_THROWS_WITH_AS(ckpt::load(f.path), doctest::Contains("trailing"), format_error);

        // wrong magic
        std::string magic = good;
        magic[0] = 'X';
        io::write_file(f.path, magic);
        CHECK_THROWS_WITH_AS(ckpt::load(f.path), doctest::Contains("magic"), format_error);

        // header byte-flip breaks either parsing or the directory tiling
        std::string hdr = good;
        hdr[16] = char(hdr[16] ^ 0x01);
        io::write_file(f.path, hdr);
        CHECK_THROWS_AS(ckpt::load(f.path), format_error);
    }

    TEST_CASE("restore validates names, shapes, and count") {
        TempFile f("ckpt_mismatch.cclt");
        Blob src;
        ckpt::save(f.path, "denoiser", {}, src.params());
        auto file = ckpt::load(f.path);

        Blob renamed;
        ParamList<float> wrongname = {{"head.weight", &renamed.w}, {"head.b", &renamed.b}};
        CHECK_THROWS_WITH_AS(ckpt::restore(file, wrongname), doctest::Contains("name"),
                             format_error);

        Tensor<float> odd(Shape{3, 1, 2, 3});
        ParamList<float> wrongshape = {{"head.w", &odd}, {"head.b", &renamed.b}};
        CHECK_THROWS_WITH_AS(ckpt::restore(file, wrongshape), doctest::Contains("shape"),
                             format_error);

        ParamList<float> short_list = {{"head.w", &renamed.w}};
        CHECK_THROWS_AS(ckpt::restore(file, short_list), format_error);
    }

    TEST_CASE("parameter group fingerprint") {
        Blob a;
        Rng rng(33);
        fill_randn(a.w, rng);
        fill_randn(a.b, rng);
        Blob b = a;
        const std::string ha = ckpt::param_group_crc(a.params());
        CHECK(ha == ckpt::param_group_crc(b.params()));
        b.w.data[0] += 1.0f;
        CHECK(ha != ckpt::param_group_crc(b.params()));
    }
}
