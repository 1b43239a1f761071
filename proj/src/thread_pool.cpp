#include "crowdmlp/thread_pool.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace crowdmlp {

namespace {

int g_requested_threads = 0;
thread_local bool t_inside_worker = false;

class Pool {
public:
    explicit Pool(int workers) {
        for (int i = 0; i < workers; ++i) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::unique_lock lock(mutex_);
            stop_ = true;
            ++generation_;
        }
        wake_.notify_all();
        for (auto& t : threads_) {
            t.join();
        }
    }

    int workers() const { return static_cast<int>(threads_.size()); }

    // Runs `body` on every worker plus the calling thread; returns when all
    // participants have finished.
    void run(const std::function<void()>& body) {
        {
            std::unique_lock lock(mutex_);
            job_ = &body;
            done_ = 0;
            ++generation_;
        }
        wake_.notify_all();
        body();
        std::unique_lock lock(mutex_);
        finished_.wait(lock, [this] { return done_ == workers(); });
        job_ = nullptr;
    }

private:
    void worker_loop() {
        t_inside_worker = true;
        std::uint64_t seen = 0;
        while (true) {
            const std::function<void()>* job = nullptr;
            {
                std::unique_lock lock(mutex_);
                wake_.wait(lock, [&] { return generation_ != seen; });
                seen = generation_;
                if (stop_) {
                    return;
                }
                job = job_;
            }
            if (job) {
                (*job)();
            }
            {
                std::unique_lock lock(mutex_);
                ++done_;
            }
            finished_.notify_one();
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mutex_;
    std::condition_variable wake_;
    std::condition_variable finished_;
    const std::function<void()>* job_ = nullptr;
    std::uint64_t generation_ = 0;
    int done_ = 0;
    bool stop_ = false;
};

Pool& pool() {
    static Pool instance(std::max(0, worker_threads() - 1));
    return instance;
}

} // namespace

void set_worker_threads(int n) {
    g_requested_threads = n;
}

int worker_threads() {
    if (g_requested_threads > 0) {
        return g_requested_threads;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_for(std::int64_t n, std::int64_t grain,
                  const std::function<void(std::int64_t, std::int64_t)>& body) {
    if (n <= 0) {
        return;
    }
    grain = std::max<std::int64_t>(grain, 1);
    Pool& p = pool();
    const int participants = p.workers() + 1;
    if (participants <= 1 || n <= grain || t_inside_worker) {
        body(0, n);
        return;
    }
    const std::int64_t max_chunks = std::min<std::int64_t>((n + grain - 1) / grain,
                                                           static_cast<std::int64_t>(participants) * 4);
    const std::int64_t chunk = (n + max_chunks - 1) / max_chunks;
    std::atomic<std::int64_t> next{0};
    p.run([&] {
        while (true) {
            const std::int64_t c = next.fetch_add(1);
            const std::int64_t begin = c * chunk;
            if (begin >= n) {
                break;
            }
            body(begin, std::min(n, begin + chunk));
        }
    });
}

} // namespace crowdmlp
