#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

namespace ribsr {

// Scalar-granular accounting of kernel scratch memory. The attention kernels
// allocate all auxiliary buffers through ScratchBuffer inside a ScratchScope,
// so the reported peak is attributable to attention alone and measured, not
// estimated. Scopes nest: a child's peak is folded into its parent on exit.

struct ScratchStats {
    std::int64_t current = 0;
    std::int64_t peak = 0;
};

namespace scratch_detail {
inline thread_local ScratchStats* g_active = nullptr;
}

class ScratchScope {
public:
    ScratchScope() : parent_(scratch_detail::g_active) {
        scratch_detail::g_active = &stats_;
    }
    ~ScratchScope() {
        scratch_detail::g_active = parent_;
        if (parent_) {
            parent_->peak = std::max(parent_->peak, parent_->current + stats_.peak);
        }
    }
    ScratchScope(const ScratchScope&) = delete;
    ScratchScope& operator=(const ScratchScope&) = delete;

    std::int64_t peak_scalars() const { return stats_.peak; }

private:
    ScratchStats stats_;
    ScratchStats* parent_;
};

inline void scratch_note_alloc(std::int64_t scalars) {
    if (auto* s = scratch_detail::g_active) {
        s->current += scalars;
        s->peak = std::max(s->peak, s->current);
    }
}

inline void scratch_note_free(std::int64_t scalars) {
    if (auto* s = scratch_detail::g_active) s->current -= scalars;
}

/// std::vector wrapper whose element count is charged against the active
/// ScratchScope for its lifetime.
template <typename T>
class ScratchBuffer {
public:
    explicit ScratchBuffer(std::size_t n, T init = T(0)) : v_(n, init) {
        scratch_note_alloc(static_cast<std::int64_t>(n));
    }
    ~ScratchBuffer() { scratch_note_free(static_cast<std::int64_t>(v_.size())); }
    ScratchBuffer(const ScratchBuffer&) = delete;
    ScratchBuffer& operator=(const ScratchBuffer&) = delete;

    T* data() { return v_.data(); }
    const T* data() const { return v_.data(); }
    T& operator[](std::size_t i) { return v_[i]; }
    const T& operator[](std::size_t i) const { return v_[i]; }
    std::size_t size() const { return v_.size(); }
    void fill(T v) { std::fill(v_.begin(), v_.end(), v); }

private:
    std::vector<T> v_;
};

}  // namespace ribsr
