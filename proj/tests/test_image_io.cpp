#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bbfcn/image_io.hpp"
#include "bbfcn/rng.hpp"

using namespace bbfcn;

namespace {

const std::filesystem::path tmp_dir = std::filesystem::temp_directory_path() / "bbfcn_io_test";

std::string tmp_path(const std::string& name) {
    std::filesystem::create_directories(tmp_dir);
    return (tmp_dir / name).string();
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

// 4x3 RGB PNG with pixel (x,y) = (60x, 80y, 200)
const std::vector<unsigned char> kTinyPng = {
    137, 80, 78, 71, 13, 10, 26, 10, 0, 0, 0, 13, 73, 72, 68, 82, 0, 0, 0, 4, 0, 0, 0, 3,
    8, 2, 0, 0, 0, 59, 150, 57, 145, 0, 0, 0, 24, 73, 68, 65, 84, 120, 156, 99, 100, 96,
    56, 97, 195, 192, 0, 65, 44, 12, 1, 12, 112, 128, 194, 1, 0, 62, 122, 2, 38, 0, 173,
    139, 83, 0, 0, 0, 0, 73, 69, 78, 68, 174, 66, 96, 130};

}  // namespace

TEST_CASE("PPM decoding scales to [0,1]") {
    const std::string path = tmp_path("red.ppm");
    std::ofstream out(path, std::ios::binary);
    out << "P6\n2 2\n255\n";
    const unsigned char px[12] = {255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255};
    out.write(reinterpret_cast<const char*>(px), 12);
    out.close();

    auto img = decode_image(path);
    REQUIRE(img.shape == std::vector<int>{3, 2, 2});
    REQUIRE(img.at(0, 0, 0) == 1.0f);
    REQUIRE(img.at(1, 0, 0) == 0.0f);
    REQUIRE(img.at(2, 0, 0) == 0.0f);
    REQUIRE(img.at(1, 0, 1) == 1.0f);
    REQUIRE(img.at(2, 1, 0) == 1.0f);
}

TEST_CASE("PGM grayscale replicates to three channels") {
    const std::string path = tmp_path("gray.pgm");
    std::ofstream out(path, std::ios::binary);
    out << "P5\n2 1\n255\n";
    const unsigned char px[2] = {0, 128};
    out.write(reinterpret_cast<const char*>(px), 2);
    out.close();

    auto img = decode_image(path);
    for (int c = 0; c < 3; ++c) {
        REQUIRE(img.at(c, 0, 0) == 0.0f);
        REQUIRE_THAT(img.at(c, 0, 1), Catch::Matchers::WithinAbs(128.0 / 255.0, 1e-6));
    }
}

TEST_CASE("PNG decoding") {
    const std::string path = tmp_path("tiny.png");
    write_bytes(path, kTinyPng);
    auto img = decode_image(path);
    REQUIRE(img.shape == std::vector<int>{3, 3, 4});
    REQUIRE_THAT(img.at(0, 0, 2), Catch::Matchers::WithinAbs(120.0 / 255.0, 1e-6));
    REQUIRE_THAT(img.at(1, 2, 0), Catch::Matchers::WithinAbs(160.0 / 255.0, 1e-6));
    REQUIRE_THAT(img.at(2, 1, 1), Catch::Matchers::WithinAbs(200.0 / 255.0, 1e-6));
}

TEST_CASE("truncated PNG is rejected") {
    const std::string path = tmp_path("broken.png");
    auto truncated = kTinyPng;
    truncated.resize(30);
    write_bytes(path, truncated);
    REQUIRE_THROWS_AS(decode_image(path), FormatError);
}

TEST_CASE("unsupported and truncated PNM containers are rejected") {
    const std::string path = tmp_path("bad.bin");
    write_bytes(path, {'Q', '9', 0, 1, 2});
    REQUIRE_THROWS_AS(decode_image(path), FormatError);

    const std::string trunc = tmp_path("trunc.ppm");
    std::ofstream out(trunc, std::ios::binary);
    out << "P6\n4 4\n255\n";
    out << "onlyafewbytes";
    out.close();
    REQUIRE_THROWS_AS(decode_image(trunc), FormatError);
}

TEST_CASE("PPM round trip is exact") {
    Rng rng(6);
    Image img({3, 5, 7});
    for (float& v : img.data)
        v = static_cast<float>(rng.next_int(0, 255)) / 255.0f;  // representable values
    const std::string path = tmp_path("roundtrip.ppm");
    write_ppm(path, img);
    auto back = decode_image(path);
    REQUIRE(back.data == img.data);
}

TEST_CASE("annotation parsing") {
    std::istringstream in(
        "#K=5\n"
        "img.png 10 10 50 50 20 20 40 20 30 30 22 40 38 40\n"
        "other.png 0 0 10 10 -1 -1 4 4 5 5 6 6 7 7\n");
    int k = 0;
    auto faces = parse_annotations(in, &k);
    REQUIRE(k == 5);
    REQUIRE(faces.size() == 2);
    REQUIRE(faces[0].path == "img.png");
    REQUIRE(faces[0].box.x == 10.0);
    REQUIRE(faces[0].box.w == 50.0);
    REQUIRE(faces[0].landmarks.size() == 5);
    for (const auto& lm : faces[0].landmarks) REQUIRE(lm.visible);
    REQUIRE(faces[0].landmarks[2].x == 30.0);
    REQUIRE_FALSE(faces[1].landmarks[0].visible);
}

TEST_CASE("annotation errors carry the line number") {
    std::istringstream wrong_count(
        "#K=5\n"
        "img.png 10 10 50 50 20 20 40 20 30 30 22 40 38\n");
    try {
        parse_annotations(wrong_count);
        FAIL("expected parse error");
    } catch (const FormatError& e) {
        REQUIRE(std::string(e.what()).find("line 2") != std::string::npos);
    }

    std::istringstream non_numeric(
        "#K=2\n"
        "img.png 0 0 5 5 1 1 2 abc\n");
    REQUIRE_THROWS_AS(parse_annotations(non_numeric), FormatError);

    std::istringstream no_header("img.png 0 0 5 5 1 1\n");
    REQUIRE_THROWS_AS(parse_annotations(no_header), FormatError);
}

TEST_CASE("annotation write/parse round trip") {
    std::vector<AnnotatedFace> faces(1);
    faces[0].path = "a.ppm";
    faces[0].box = {1, 2, 30, 30};
    faces[0].landmarks = {{5, 6, true}, {0, 0, false}, {9.5, 10.25, true}};
    std::ostringstream out;
    write_annotations(out, faces, 3);
    std::istringstream in(out.str());
    auto back = parse_annotations(in);
    REQUIRE(back.size() == 1);
    REQUIRE(back[0].landmarks[0].x == 5.0);
    REQUIRE_FALSE(back[0].landmarks[1].visible);
    REQUIRE(back[0].landmarks[2].y == 10.25);
}

TEST_CASE("crop_with_zero_pad") {
    Tensor<float> src({1, 8, 8});
    Rng rng(12);
    for (float& v : src.data) v = static_cast<float>(rng.next_double());

    // fully interior crop equals the plain sub-array
    auto interior = crop_with_zero_pad(src, 4, 4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) REQUIRE(interior.at(0, y, x) == src.at(0, y + 2, x + 2));

    // corner crop zero-pads the out-of-bounds quadrant
    auto corner = crop_with_zero_pad(src, 0, 0, 6);
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) REQUIRE(corner.at(0, y, x) == 0.0f);
    REQUIRE(corner.at(0, 3, 3) == src.at(0, 0, 0));

    // center fully outside gives an all-zero patch
    auto outside = crop_with_zero_pad(src, 100, 100, 6);
    for (float v : outside.data) REQUIRE(v == 0.0f);
}

TEST_CASE("crop translation consistency") {
    Tensor<float> src({1, 16, 16});
    Rng rng(13);
    for (float& v : src.data) v = static_cast<float>(rng.next_double());

    Tensor<float> shifted({1, 16, 16});
    const int t = 3;
    for (int y = 0; y < 16 - t; ++y)
        for (int x = 0; x < 16 - t; ++x) shifted.at(0, y + t, x + t) = src.at(0, y, x);

    auto a = crop_with_zero_pad(src, 6, 6, 4);
    auto b = crop_with_zero_pad(shifted, 6 + t, 6 + t, 4);
    REQUIRE(a.data == b.data);
}
