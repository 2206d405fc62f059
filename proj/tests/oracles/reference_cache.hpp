#pragma once

// Position-aware model of the documented cache behavior. Deliberately dumb:
// an explicit slot matrix per slabset and straight-line probe loops, no
// occupancy masks, no grouping, no worker pool. Query results, insertion
// positions, recency stamps, and eviction picks must match the production
// cache slot for slot.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "hps/xxhash64.hpp"

namespace hps_test {

class ReferenceCache {
 public:
  ReferenceCache(std::size_t slabset_count, std::uint32_t slabs_per_set,
                 std::uint32_t dimension)
      : slabset_count_(slabset_count),
        slabs_per_set_(slabs_per_set),
        dimension_(dimension),
        sets_(slabset_count) {
    for (auto& set : sets_) {
      set.resize(static_cast<std::size_t>(slabs_per_set) * 32);
    }
  }

  // Returns one flag per key (1 = hit) and writes hit rows into out.
  std::vector<std::uint8_t> query(std::span<const std::uint64_t> keys,
                                  std::span<float> out) {
    ++clock_;
    std::vector<std::uint8_t> hit(keys.size(), 0);
    for (std::size_t i = 0; i < keys.size(); ++i) {
      Slot* slot = probe(keys[i]);
      if (slot) {
        for (std::uint32_t c = 0; c < dimension_; ++c) {
          out[i * dimension_ + c] = slot->vec[c];
        }
        slot->counter = clock_;
        hit[i] = 1;
      }
    }
    return hit;
  }

  void replace(std::span<const std::uint64_t> keys,
               std::span<const float> vectors) {
    for (std::size_t i = 0; i < keys.size(); ++i) {
      const std::uint64_t key = keys[i];
      const float* row = vectors.data() + i * dimension_;
      const std::size_t set_index = set_of(key);
      auto& set = sets_[set_index];

      Slot* found = nullptr;
      std::ptrdiff_t free_slot = -1;
      const std::uint32_t first = first_slab_of(key);
      for (std::uint32_t step = 0; step < slabs_per_set_ && !found; ++step) {
        const std::uint32_t slab = (first + step) % slabs_per_set_;
        bool slab_has_free = false;
        std::ptrdiff_t lowest_free = -1;
        for (std::uint32_t j = 0; j < 32; ++j) {
          Slot& s = set[slab * 32 + j];
          if (s.occupied && s.key == key) {
            found = &s;
            break;
          }
          if (!s.occupied && !slab_has_free) {
            slab_has_free = true;
            lowest_free = slab * 32 + j;
          }
        }
        if (!found && slab_has_free) {
          free_slot = lowest_free;
          break;
        }
      }

      if (found) {
        found->counter = clock_;  // resident keys only get a recency bump
        continue;
      }
      if (free_slot >= 0) {
        Slot& s = set[static_cast<std::size_t>(free_slot)];
        s.occupied = true;
        s.key = key;
        s.counter = clock_;
        s.vec.assign(row, row + dimension_);
        continue;
      }
      // Evict the minimum counter; scanning in slab-major slot order makes
      // the first strict minimum the lowest (slab, slot) tie-break.
      std::size_t victim = 0;
      for (std::size_t j = 1; j < set.size(); ++j) {
        if (set[j].counter < set[victim].counter) {
          victim = j;
        }
      }
      set[victim].key = key;
      set[victim].counter = clock_;
      set[victim].vec.assign(row, row + dimension_);
    }
  }

  std::size_t update(std::span<const std::uint64_t> keys,
                     std::span<const float> vectors) {
    std::size_t written = 0;
    for (std::size_t i = 0; i < keys.size(); ++i) {
      Slot* slot = probe(keys[i]);
      if (slot) {
        const float* row = vectors.data() + i * dimension_;
        slot->vec.assign(row, row + dimension_);
        ++written;
      }
    }
    return written;
  }

  std::vector<std::uint64_t> resident_keys() const {
    std::vector<std::uint64_t> out;
    for (const auto& set : sets_) {
      for (const Slot& s : set) {
        if (s.occupied) {
          out.push_back(s.key);
        }
      }
    }
    return out;
  }

  std::uint64_t clock() const { return clock_; }

 private:
  struct Slot {
    bool occupied = false;
    std::uint64_t key = 0;
    std::uint64_t counter = 0;
    std::vector<float> vec;
  };

  std::size_t set_of(std::uint64_t key) const {
    return hps::xxh64_key(key, hps::kSlabsetSeed) % slabset_count_;
  }
  std::uint32_t first_slab_of(std::uint64_t key) const {
    return static_cast<std::uint32_t>(hps::xxh64_key(key, hps::kSlabSeed) %
                                      slabs_per_set_);
  }

  // Probe order scan stopping at the first slab with a free slot; returns
  // the slot holding key or null when the key cannot be resident.
  Slot* probe(std::uint64_t key) {
    auto& set = sets_[set_of(key)];
    const std::uint32_t first = first_slab_of(key);
    for (std::uint32_t step = 0; step < slabs_per_set_; ++step) {
      const std::uint32_t slab = (first + step) % slabs_per_set_;
      bool slab_full = true;
      for (std::uint32_t j = 0; j < 32; ++j) {
        Slot& s = set[slab * 32 + j];
        if (s.occupied && s.key == key) {
          return &s;
        }
        if (!s.occupied) {
          slab_full = false;
        }
      }
      if (!slab_full) {
        return nullptr;
      }
    }
    return nullptr;
  }

  std::size_t slabset_count_;
  std::uint32_t slabs_per_set_;
  std::uint32_t dimension_;
  std::uint64_t clock_ = 0;
  std::vector<std::vector<Slot>> sets_;
};

}  // namespace hps_test
