#include <gtest/gtest.h>

#include <filesystem>

#include "cnnscope/emit.hpp"
#include "cnnscope/views.hpp"
#include "support.hpp"

using namespace cnnscope;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

PolyData random_polydata(std::uint64_t seed) {
  Rng rng(seed);
  PolyData pd;
  const std::size_t n = 1 + rng.below(300);
  pd.points.resize(n);
  for (auto& p : pd.points)
    for (auto& v : p) v = static_cast<float>(rng.uniform(-1e3, 1e3) * (rng.uniform() < 0.1 ? 1e-20 : 1.0));
  const std::size_t nv = rng.below(n + 1);
  for (std::size_t i = 0; i < nv; ++i) pd.verts.push_back(static_cast<std::int64_t>(rng.below(n)));
  const std::size_t nq = rng.below(n / 2 + 1);
  for (std::size_t i = 0; i < nq; ++i)
    pd.quads.push_back({static_cast<std::int64_t>(rng.below(n)), static_cast<std::int64_t>(rng.below(n)),
                        static_cast<std::int64_t>(rng.below(n)), static_cast<std::int64_t>(rng.below(n))});
  const std::size_t ns = rng.below(4);
  for (std::size_t s = 0; s < ns; ++s) {
    auto& a = pd.add_scalar("s" + std::to_string(s));
    for (auto& v : a.values) v = static_cast<float>(rng.uniform(-5, 5));
  }
  return pd;
}

PolyData single_point() {
  PolyData pd;
  pd.points = {{0.0f, 0.0f, 0.0f}};
  pd.verts = {0};
  pd.add_scalar("weight").values = {0.5f};
  return pd;
}

}  // namespace

TEST(Csv, SinglePointExactBody) {
  const auto dir = scratch_dir("csv_single");
  const std::size_t bytes = write_csv(single_point(), dir / "a.csv");
  EXPECT_EQ(slurp(dir / "a.csv"), "x,y,z,weight\n0,0,0,0.5\n");
  EXPECT_EQ(bytes, fs::file_size(dir / "a.csv"));
}

TEST(Csv, EmptyGeometryIsHeaderOnly) {
  const auto dir = scratch_dir("csv_empty");
  PolyData pd;
  pd.add_scalar("weight");
  write_csv(pd, dir / "a.csv");
  EXPECT_EQ(slurp(dir / "a.csv"), "x,y,z,weight\n");
}

TEST(Csv, OneRowPerPointAndRoundTripValues) {
  const auto dir = scratch_dir("csv_rows");
  const PolyData pd = random_polydata(17);
  write_csv(pd, dir / "a.csv");
  std::ifstream is(dir / "a.csv");
  std::string line;
  std::getline(is, line);
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    std::vector<float> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(std::stof(cell));
    ASSERT_EQ(cols.size(), 3 + pd.scalars.size());
    for (int k = 0; k < 3; ++k) EXPECT_EQ(cols[k], pd.points[rows][k]);
    for (std::size_t s = 0; s < pd.scalars.size(); ++s) EXPECT_EQ(cols[3 + s], pd.scalars[s].values[rows]);
    ++rows;
  }
  EXPECT_EQ(rows, pd.points.size());
}

TEST(Vtp, QuadConnectivityAndOffsets) {
  const auto dir = scratch_dir("vtp_quads");
  PolyData pd;
  pd.points = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {2, 0, 0}, {2, 1, 0}};
  pd.quads = {{0, 1, 2, 3}, {1, 4, 5, 2}};
  pd.add_scalar("weight");
  write_vtp(pd, dir / "a.vtp", VtpMode::ascii);
  const std::string text = slurp(dir / "a.vtp");
  EXPECT_NE(text.find("NumberOfPolys=\"2\""), std::string::npos);
  EXPECT_NE(text.find("0 1 2 3 1 4 5 2"), std::string::npos);
  EXPECT_NE(text.find("Name=\"offsets\" format=\"ascii\">\n          4 8\n"), std::string::npos);
  EXPECT_NE(text.find("Scalars=\"weight\""), std::string::npos);
  for (auto mode : {VtpMode::ascii, VtpMode::binary}) {
    write_vtp(pd, dir / "b.vtp", mode);
    EXPECT_TRUE(same_polydata(read_vtp(dir / "b.vtp"), pd));
  }
}

TEST(Vtp, SinglePointRoundTrip) {
  const auto dir = scratch_dir("vtp_single");
  for (auto mode : {VtpMode::ascii, VtpMode::binary}) {
    write_vtp(single_point(), dir / "a.vtp", mode);
    EXPECT_TRUE(same_polydata(read_vtp(dir / "a.vtp"), single_point()));
  }
}

TEST(Vtp, WeightGridOfFirstConvRoundTrips) {
  const auto dir = scratch_dir("vtp_grid");
  const Tensor4 w = random_tensor({3, 3, 1, 16}, 3, -0.3, 0.3);
  const PolyData pd = build_weight_grid(w, grid_layout(16));
  for (auto mode : {VtpMode::ascii, VtpMode::binary}) {
    write_vtp(pd, dir / "a.vtp", mode);
    const PolyData back = read_vtp(dir / "a.vtp");
    EXPECT_TRUE(same_polydata(back, pd));
  }
}

TEST(Vtp, TenThousandPointsRoundTrip) {
  const auto dir = scratch_dir("vtp_big");
  PolyData pd;
  Rng rng(10816);
  pd.points.resize(10816);
  for (auto& p : pd.points)
    for (auto& v : p) v = static_cast<float>(rng.uniform(-100, 100));
  for (std::int64_t i = 0; i + 3 < 10816; i += 4) pd.quads.push_back({i, i + 1, i + 2, i + 3});
  for (auto& v : pd.add_scalar("intensity").values) v = static_cast<float>(rng.uniform());
  for (auto mode : {VtpMode::ascii, VtpMode::binary}) {
    write_vtp(pd, dir / "a.vtp", mode);
    EXPECT_TRUE(same_polydata(read_vtp(dir / "a.vtp"), pd));
  }
}

TEST(Vtp, RandomGeometryRoundTripProperty) {
  const auto dir = scratch_dir("vtp_prop");
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const PolyData pd = random_polydata(seed);
    for (auto mode : {VtpMode::ascii, VtpMode::binary}) {
      write_vtp(pd, dir / "a.vtp", mode);
      ASSERT_TRUE(same_polydata(read_vtp(dir / "a.vtp"), pd)) << "seed " << seed;
    }
    write_csv(pd, dir / "a.csv");
  }
}

TEST(Vtp, TruncatedFileNamesMissingElement) {
  const auto dir = scratch_dir("vtp_trunc");
  const PolyData pd = random_polydata(5);
  for (auto mode : {VtpMode::ascii, VtpMode::binary}) {
    write_vtp(pd, dir / "a.vtp", mode);
    const std::string full = slurp(dir / "a.vtp");
    for (double frac : {0.3, 0.7, 0.98}) {
      std::ofstream(dir / "t.vtp", std::ios::binary) << full.substr(0, static_cast<std::size_t>(full.size() * frac));
      try {
        read_vtp(dir / "t.vtp");
        FAIL() << "no error at fraction " << frac;
      } catch (const ParseError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find('<'), std::string::npos) << msg;
      }
    }
  }
  std::ofstream(dir / "e.vtp") << "<?xml version=\"1.0\"?>\n";
  try {
    read_vtp(dir / "e.vtp");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_STREQ(e.what(), "missing <VTKFile>");
  }
}

TEST(Vtp, BinarySmallerThanAscii) {
  const auto dir = scratch_dir("vtp_size");
  PolyData pd;
  Rng rng(1);
  pd.points.resize(4000);
  for (auto& p : pd.points)
    for (auto& v : p) v = static_cast<float>(rng.uniform(-1, 1));
  for (std::int64_t i = 0; i < 4000; i += 4) pd.quads.push_back({i, i + 1, i + 2, i + 3});
  for (auto& v : pd.add_scalar("weight").values) v = static_cast<float>(rng.uniform(-1, 1));
  const auto bin = write_vtp(pd, dir / "b.vtp", VtpMode::binary);
  const auto asc = write_vtp(pd, dir / "a.vtp", VtpMode::ascii);
  const auto csv = write_csv(pd, dir / "a.csv");
  EXPECT_LT(bin, asc);
  EXPECT_LT(bin, csv);
}

TEST(Vtp, InvalidGeometryRejected) {
  const auto dir = scratch_dir("vtp_invalid");
  PolyData pd = single_point();
  pd.quads.push_back({0, 0, 0, 1});
  EXPECT_THROW(write_vtp(pd, dir / "a.vtp"), ShapeError);
  EXPECT_THROW(write_csv(pd, dir / "a.csv"), ShapeError);
  EXPECT_THROW(read_vtp(dir / "missing.vtp"), IoError);
}

TEST(SeriesFilename, ZeroPaddedStep) {
  EXPECT_EQ(series_filename("weight_grid", 0, 1080, "vtp"), "weight_grid_0_00001080.vtp");
  EXPECT_EQ(series_filename("image_grid", 1, 7, "csv"), "image_grid_1_00000007.csv");
}
