#include "cf/threading.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "cf/error.hpp"

namespace cf {

int thread_count_from_env() {
  if (const char* env = std::getenv("CF_NUM_THREADS")) {
    char* end = nullptr;
    long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1)
      throw ParameterError("CF_NUM_THREADS: expected positive integer, got '" +
                           std::string(env) + "'");
    return static_cast<int>(n);
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_chunks(int n_threads, int n_chunks, const std::function<void(int)>& fn) {
  if (n_chunks <= 0) return;
  if (n_threads <= 1 || n_chunks == 1) {
    for (int c = 0; c < n_chunks; ++c) fn(c);
    return;
  }

  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;

  auto worker = [&] {
    for (;;) {
      int c = next.fetch_add(1, std::memory_order_relaxed);
      if (c >= n_chunks) return;
      try {
        fn(c);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };

  int spawn = n_threads < n_chunks ? n_threads : n_chunks;
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(spawn));
  for (int i = 0; i < spawn; ++i) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace cf
