#include <mdnet/image_io.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace mdnet;
namespace fs = std::filesystem;

namespace {

// Values on the 8-bit grid so encode/decode is lossless.
Image grid_image(std::size_t h, std::size_t w)
{
    Image img(3, h, w);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>((i * 37) % 256) / 255.0f;
    return img;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("mdnet_test_io_" + name))
    {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

} // namespace

TEST(Png, RoundTripIsLossless)
{
    const Image img = grid_image(17, 23);
    const Image back = io::decode_png(io::encode_png(img), "mem");
    ASSERT_EQ(back.height, 17u);
    ASSERT_EQ(back.width, 23u);
    EXPECT_EQ(back.data, img.data);
}

TEST(Ppm, RoundTripAndComments)
{
    const Image img = grid_image(5, 7);
    EXPECT_EQ(io::decode_ppm(io::encode_ppm(img), "mem").data, img.data);

    std::string bytes = io::encode_ppm(img);
    bytes.insert(3, "# a comment\n");
    EXPECT_EQ(io::decode_ppm(bytes, "mem").data, img.data);
}

TEST(Ppm, Malformed)
{
    EXPECT_THROW(io::decode_ppm("P5\n1 1\n255\n\0", "mem"), FormatError);
    EXPECT_THROW(io::decode_ppm("P6\n2 2\n65535\n", "mem"), FormatError);
    EXPECT_THROW(io::decode_ppm("P6\n2 2\n255\nabc", "mem"), FormatError);
    EXPECT_THROW(io::decode_ppm("P6\nx 2\n255\n", "mem"), FormatError);
}

TEST(Png, Malformed)
{
    EXPECT_THROW(io::decode_png("not a png at all", "mem"), FormatError);
    auto bytes = io::encode_png(grid_image(8, 8));
    EXPECT_THROW(io::decode_png(std::string_view(bytes).substr(0, bytes.size() / 2), "mem"), FormatError);
}

TEST(Files, SaveAndLoadBothFormats)
{
    TempDir dir("files");
    const Image img = grid_image(9, 11);
    io::save_image(dir.path / "a.png", img);
    io::save_image(dir.path / "b.ppm", img);
    EXPECT_EQ(io::load_image(dir.path / "a.png").data, img.data);
    EXPECT_EQ(io::load_image(dir.path / "b.ppm").data, img.data);
    EXPECT_THROW(io::load_image(dir.path / "missing.png"), FormatError);
}

TEST(Corpus, SortedAndSkipsSmallImages)
{
    TempDir dir("corpus");
    io::save_image(dir.path / "b.png", grid_image(40, 40));
    io::save_image(dir.path / "a.ppm", grid_image(40, 50));
    io::save_image(dir.path / "c.png", grid_image(10, 40));
    std::ofstream(dir.path / "notes.txt") << "ignored";
    std::ostringstream warn;
    const auto c = io::load_corpus(dir.path, 32, warn);
    ASSERT_EQ(c.images.size(), 2u);
    EXPECT_EQ(c.names[0], "a.ppm");
    EXPECT_EQ(c.names[1], "b.png");
    EXPECT_NE(warn.str().find("c.png"), std::string::npos);
}

TEST(Corpus, EmptyOrMissing)
{
    TempDir dir("empty");
    std::ostringstream warn;
    EXPECT_THROW(io::load_corpus(dir.path, 32, warn), FormatError);
    io::save_image(dir.path / "tiny.png", grid_image(8, 8));
    EXPECT_THROW(io::load_corpus(dir.path, 32, warn), FormatError);
    EXPECT_THROW(io::load_corpus(dir.path / "nope", 32, warn), FormatError);
}
