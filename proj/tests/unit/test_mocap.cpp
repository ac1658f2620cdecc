#include <doctest.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "stt/mocap/bvh.hpp"
#include "stt/mocap/kinematics.hpp"
#include "stt/mocap/retarget.hpp"
#include "temp_dir.hpp"

using namespace stt;
using namespace stt::mocap;

namespace {

const char* kTwoJoint = R"(HIERARCHY
ROOT Hips
{
  OFFSET 0 0 0
  CHANNELS 6 Xposition Yposition Zposition Zrotation Xrotation Yrotation
  JOINT Spine
  {
    OFFSET 0 10 0
    CHANNELS 3 Zrotation Xrotation Yrotation
    End Site
    {
      OFFSET 0 5 0
    }
  }
}
MOTION
Frames: 2
Frame Time: 0.0333333
0 0 0 0 0 0 0 0 0
1 2 3 90 0 0 0 0 90
)";

std::array<Axis, 3> random_order(Rng& rng) {
  std::uniform_int_distribution<int> pick(0, 2);
  return {Axis(pick(rng)), Axis(pick(rng)), Axis(pick(rng))};
}

char letter(Axis a) { return a == Axis::X ? 'X' : a == Axis::Y ? 'Y' : 'Z'; }

}  // namespace

TEST_CASE("BVH hierarchy and motion are parsed") {
  const BvhDocument doc = parse_bvh(kTwoJoint);
  REQUIRE(doc.joint_count() == 3);
  CHECK(doc.joint(0).name == "Hips");
  CHECK(doc.joint(1).name == "Spine");
  CHECK(doc.joint(2).name == "Spine_End");
  CHECK(doc.joint(2).is_end_site);
  CHECK(*doc.joint(2).parent == 1);
  CHECK(doc.frame_count() == 2);
  CHECK(doc.channel_count() == 9);
  CHECK(doc.channel_offset(1) == 6);
  CHECK(doc.frame_time() == doctest::Approx(0.0333333));
  CHECK(doc.find("Spine") == std::optional<std::size_t>(1));
  CHECK_FALSE(doc.find("Head").has_value());
  CHECK(doc.children(0) == std::vector<std::size_t>{1});
}

TEST_CASE("forward kinematics of a hand-checked pose") {
  const BvhDocument doc = parse_bvh(kTwoJoint);
  const JointPositions rest = forward_kinematics(doc, 0);
  REQUIRE(rest.joints == std::vector<std::size_t>{0, 1});
  CHECK(rest.positions(1, 1) == doctest::Approx(10.0));

  // Frame 1: root at (1,2,3) rotated 90 degrees about Z, so the spine offset
  // (0,10,0) maps to (-10,0,0).
  const JointPositions p = forward_kinematics(doc, 1);
  CHECK(p.positions(0, 0) == doctest::Approx(1.0));
  CHECK(p.positions(0, 2) == doctest::Approx(3.0));
  CHECK(p.positions(1, 0) == doctest::Approx(-9.0));
  CHECK(p.positions(1, 1) == doctest::Approx(2.0));
  CHECK(p.positions(1, 2) == doctest::Approx(3.0));
  CHECK_THROWS_AS(forward_kinematics(doc, 2), std::out_of_range);
}

TEST_CASE("malformed BVH files report the failing line") {
  std::string width = kTwoJoint;
  width.replace(width.find("0 0 0 0 0 0 0 0 0"), 17, "0 0 0 0 0 0 0 0");
  CHECK_THROWS_AS(parse_bvh(width), BvhError);

  std::string frames = kTwoJoint;
  frames.replace(frames.find("Frames: 2"), 9, "Frames: 3");
  CHECK_THROWS_AS(parse_bvh(frames), BvhError);

  std::string channel = kTwoJoint;
  channel.replace(channel.find("Zrotation Xrotation Yrotation\n    End"), 9, "Wrotation");
  try {
    parse_bvh(channel);
    FAIL("expected a parse error");
  } catch (const BvhError& e) {
    CHECK(e.line() == 9);
  }
  CHECK_THROWS_AS(parse_bvh(""), BvhError);
  CHECK_THROWS_AS(parse_bvh("HIERARCHY\nROOT A\n{\n OFFSET 0 0\n"), BvhError);
}

TEST_CASE("canonical BVH text round-trips") {
  Rng rng = make_rng(4);
  for (int i = 0; i < 10; ++i) {
    const BvhDocument doc = oracle::random_skeleton(rng, 3 + i * 5, 1 + i);
    const BvhDocument back = parse_bvh(write_bvh(doc));
    REQUIRE(back.joint_count() == doc.joint_count());
    for (std::size_t j = 0; j < doc.joint_count(); ++j) {
      CHECK(back.joint(j).name == doc.joint(j).name);
      CHECK(back.joint(j).parent == doc.joint(j).parent);
      CHECK(back.joint(j).channels == doc.joint(j).channels);
      CHECK(back.joint(j).offset == doc.joint(j).offset);
    }
    CHECK(back.motion() == doc.motion());
  }
}

TEST_CASE("single-axis rotations follow the right-hand rule") {
  const Eigen::Vector3d x = axis_rotation(Axis::Z, 90) * Eigen::Vector3d::UnitX();
  CHECK(x.isApprox(Eigen::Vector3d::UnitY(), 1e-12));
  const Eigen::Vector3d y = axis_rotation(Axis::X, 90) * Eigen::Vector3d::UnitY();
  CHECK(y.isApprox(Eigen::Vector3d::UnitZ(), 1e-12));
  const Eigen::Vector3d z = axis_rotation(Axis::Y, 90) * Eigen::Vector3d::UnitZ();
  CHECK(z.isApprox(Eigen::Vector3d::UnitX(), 1e-12));
}

TEST_CASE("Euler composition matches the reference product and stays orthonormal") {
  Rng rng = make_rng(8);
  std::uniform_real_distribution<double> angle(-360.0, 360.0);
  for (int i = 0; i < 500; ++i) {
    const auto order = random_order(rng);
    const Eigen::Vector3d a(angle(rng), angle(rng), angle(rng));
    const Rotation3 r = euler_to_matrix(a, order);
    const Eigen::Matrix3d ref = oracle::rotation(letter(order[0]), a[0]) * oracle::rotation(letter(order[1]), a[1]) *
                                oracle::rotation(letter(order[2]), a[2]);
    CHECK((r - ref).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(r.determinant() - 1.0) < 1e-12);
  }
}

TEST_CASE("memoized forward kinematics equals the per-joint chain product") {
  Rng rng = make_rng(21);
  std::uniform_int_distribution<std::size_t> joints(2, 72), frames(1, 20);
  double worst = 0;
  for (int s = 0; s < 25; ++s) {
    const BvhDocument doc = oracle::random_skeleton(rng, joints(rng), frames(rng));
    for (std::size_t f = 0; f < doc.frame_count(); ++f) {
      const JointPositions p = forward_kinematics(doc, f);
      const auto ref = oracle::fk_chain_product(doc, f);
      REQUIRE(ref.size() == p.joints.size());
      for (std::size_t r = 0; r < ref.size(); ++r)
        worst = std::max(worst, (p.positions.row(Eigen::Index(r)).transpose() - ref[r]).cwiseAbs().maxCoeff());
    }
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("position channels add to the joint offset") {
  const BvhDocument doc = parse_bvh(kTwoJoint);
  const Transform4 t = joint_transform(doc, 0, 1);
  CHECK(t(0, 3) == doctest::Approx(1.0));
  CHECK(t(1, 3) == doctest::Approx(2.0));
  CHECK(t(2, 3) == doctest::Approx(3.0));
}

TEST_CASE("built-in 72 -> 25 mapping") {
  const auto hierarchy = axis_neuron_hierarchy();
  CHECK(hierarchy.size() == 72);
  std::size_t end_sites = 0;
  for (const auto& j : hierarchy) end_sites += j.is_end_site ? 1 : 0;
  CHECK(end_sites == 13);

  const JointMapping& m = axis72_to_ntu25();
  CHECK(m.target_count == 25);
  CHECK(m.entries.size() == 25);
  const JointMapping reparsed = parse_mapping(axis72_to_ntu25_text());
  CHECK(reparsed.entries == m.entries);
  CHECK(parse_mapping(write_mapping(m)).entries == m.entries);

  // The shipped data file carries the same table.
  const auto file = std::filesystem::path(STT_SOURCE_DIR) / "data" / "axis72_to_ntu25.map";
  CHECK(load_mapping(file).entries == m.entries);
}

TEST_CASE("mapping validation") {
  CHECK_THROWS_AS(parse_mapping("0 Hips\n0 Spine\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_mapping("0 Hips\n2 Spine\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_mapping("zero Hips\n"), std::invalid_argument);
  const BvhDocument doc = parse_bvh(kTwoJoint);
  CHECK_NOTHROW(validate_mapping(parse_mapping("0 Hips\n1 Spine\n"), doc));
  CHECK_THROWS_AS(validate_mapping(parse_mapping("0 Hips\n1 Head\n"), doc), std::invalid_argument);
  CHECK_THROWS_AS(validate_mapping(parse_mapping("0 Hips\n1 Spine_End\n"), doc), std::invalid_argument);
}

TEST_CASE("retargeting picks the mapped joints' world positions") {
  std::vector<BvhJoint> joints = axis_neuron_hierarchy();
  std::size_t channels = 0;
  for (const auto& j : joints) channels += j.channels.size();
  Rng rng = make_rng(6);
  std::uniform_real_distribution<double> angle(-30.0, 30.0);
  MotionMatrix motion(5, Eigen::Index(channels));
  for (Eigen::Index f = 0; f < motion.rows(); ++f)
    for (Eigen::Index c = 0; c < motion.cols(); ++c) motion(f, c) = angle(rng);
  const BvhDocument doc(joints, 1.0 / 60.0, motion);

  const SkeletonSequence seq = retarget(doc, axis72_to_ntu25());
  CHECK(seq.channels == 3);
  CHECK(seq.frames == 5);
  CHECK(seq.joints == 25);
  CHECK(seq.layout == "ntu25");
  for (std::size_t f = 0; f < 5; ++f) {
    const auto ref = oracle::fk_chain_product(doc, f);
    std::vector<std::size_t> row_of(doc.joint_count());
    std::size_t r = 0;
    for (std::size_t j = 0; j < doc.joint_count(); ++j)
      if (!doc.joint(j).is_end_site) row_of[j] = r++;
    for (const auto& [target, name] : axis72_to_ntu25().entries) {
      const std::size_t j = *doc.find(name);
      for (std::size_t c = 0; c < 3; ++c) CHECK(seq.at(c, f, target) == doctest::Approx(ref[row_of[j]][c]).epsilon(1e-12));
    }
  }
}

TEST_CASE("loading a missing BVH file fails cleanly") {
  CHECK_THROWS_AS(load_bvh("/nonexistent/take.bvh"), BvhError);
  TempDir dir("bvh");
  const auto path = dir.path / "take.bvh";
  save_bvh(path, parse_bvh(kTwoJoint));
  CHECK(load_bvh(path).joint_count() == 3);
}
