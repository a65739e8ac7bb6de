#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynfield {

template <typename T>
using MatX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using Vec3 = Eigen::Matrix<T, 3, 1>;
// Flat buffer with Eigen packet alignment, for Eigen::Map views.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;
template <typename T>
using Vec2 = Eigen::Matrix<T, 2, 1>;
template <typename T>
using Mat3 = Eigen::Matrix<T, 3, 3>;

using Vec3d = Vec3<double>;
using Mat3d = Mat3<double>;

// Error taxonomy shared by every module.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct AlignmentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training stage: A = progressive pose + static field, B = dynamic field
// active with poses frozen, C = hand-off to the next sub-scene.
enum class Stage { A_ProgressivePose, B_DynamicActive, C_Handoff };

inline const char* to_string(Stage s) {
    switch (s) {
        case Stage::A_ProgressivePose: return "A";
        case Stage::B_DynamicActive: return "B";
        case Stage::C_Handoff: return "C";
    }
    return "?";
}

inline bool dynamic_active(Stage s) { return s != Stage::A_ProgressivePose; }

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ConfigError(what);
}

// 64-bit FNV-1a, used for config hashes and cache tags.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace dynfield
