import threading
import time
import unittest

from smartfeat.executor import default_jobs, make_executor, run_jobs


class TestExecutor(unittest.TestCase):
    def test_inline(self):
        assert make_executor(1) is None
        assert run_jobs(lambda x: x * x, [3, 1, 2]) == [9, 1, 4]
        assert default_jobs() >= 1

    def test_results_in_item_order(self):
        executor = make_executor(4)
        try:
            # later items finish first
            results = run_jobs(lambda x: (time.sleep(0.01 * (5 - x)), x)[1], list(range(5)), executor)
        finally:
            executor.shutdown()
        assert results == [0, 1, 2, 3, 4]

    def test_runs_on_workers(self):
        executor = make_executor(2)
        try:
            names = run_jobs(lambda _: threading.current_thread().name, [0, 1], executor)
        finally:
            executor.shutdown()
        assert all(name.startswith("smartfeat") for name in names)

    def test_failure_propagates(self):
        def job(x):
            if x == 2:
                raise ValueError("two")
            return x

        executor = make_executor(3)
        try:
            with self.assertRaises(ValueError):
                run_jobs(job, [0, 1, 2, 3], executor)
        finally:
            executor.shutdown()
        with self.assertRaises(ValueError):
            run_jobs(job, [0, 1, 2, 3])

    def test_bad_jobs(self):
        with self.assertRaises(ValueError):
            make_executor(0)


if __name__ == "__main__":
    unittest.main()
