import numpy as np
import pytest

from haccmini.fft import (
    Communicator,
    ContractError,
    PencilFFT,
    dft3_direct,
    split_extents,
    transpose,
    x_pencils,
    y_pencils,
    z_pencils,
)

RANK_GRIDS = [(1, 1), (2, 1), (2, 2), (4, 2)]


def random_grid(n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, n, n))


class TestLayout:
    def test_split_extents_tile_exactly(self):
        for n in (8, 12, 13):
            for p in (1, 2, 3, 5):
                ext = split_extents(n, p)
                assert ext[0][0] == 0 and ext[-1][1] == n
                for (a0, a1), (b0, b1) in zip(ext, ext[1:]):
                    assert a1 == b0

    @pytest.mark.parametrize("rank_grid", RANK_GRIDS)
    def test_extents_tile_grid_once(self, rank_grid):
        for make in (z_pencils, y_pencils, x_pencils):
            lay = make((12, 12, 12), rank_grid)
            seen = np.zeros((12, 12, 12), dtype=int)
            for r in range(lay.n_ranks):
                (x0, x1), (y0, y1), (z0, z1) = lay.owned_extent(r)
                seen[x0:x1, y0:y1, z0:z1] += 1
            assert np.all(seen == 1)

    def test_scatter_gather_roundtrip(self):
        g = random_grid(8, 3)
        lay = z_pencils((8, 8, 8), (2, 2))
        assert np.array_equal(lay.gather(lay.scatter(g)), g)


class TestTranspose:
    def test_single_rank_identity_and_zero_messages(self):
        g = random_grid(4, 1)
        comm = Communicator(1)
        src = z_pencils((4, 4, 4), (1, 1))
        dst = x_pencils((4, 4, 4), (1, 1))
        out = transpose(src.scatter(g), src, dst, comm)
        assert np.array_equal(out[0], g)
        assert comm.stats()["messages"] == 0

    def test_two_rank_ownership_table(self):
        # 2x1 grid, 4^3 data: before, element (i, j, k) lives on rank i//2;
        # after a z->x transpose it must live on rank j//2
        n = 4
        g = np.arange(n ** 3, dtype=float).reshape(n, n, n)
        src = z_pencils((n, n, n), (2, 1))
        dst = x_pencils((n, n, n), (2, 1))
        blocks = src.scatter(g)
        out = transpose(blocks, src, dst, Communicator(2))
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    rank = j // 2
                    (x0, _), (y0, _), (z0, _) = dst.owned_extent(rank)
                    assert out[rank][i - x0, j - y0, k - z0] == g[i, j, k]

    def test_involution_bitwise(self):
        g = random_grid(8, 5)
        src = z_pencils((8, 8, 8), (2, 2))
        dst = y_pencils((8, 8, 8), (2, 2))
        comm = Communicator(4)
        there = transpose(src.scatter(g), src, dst, comm)
        back = transpose(there, dst, src, comm)
        ref = src.scatter(g)
        for r in range(4):
            assert np.array_equal(back[r], ref[r])

    def test_row_column_locality_message_count(self):
        # each rank exchanges with at most max(r1, r2) - 1 peers per transpose
        n = 8
        for rank_grid in RANK_GRIDS:
            r1, r2 = rank_grid
            lay_z = z_pencils((n, n, n), rank_grid)
            lay_y = y_pencils((n, n, n), rank_grid)
            lay_x = x_pencils((n, n, n), rank_grid)
            g = random_grid(n, 7)
            for src_lay, dst_lay in [(lay_z, lay_y), (lay_y, lay_x)]:
                comm = Communicator(lay_z.n_ranks)
                peers = {r: set() for r in range(lay_z.n_ranks)}
                orig_send = comm.send

                def spy(src, dst, payload):
                    peers[src].add(dst)
                    orig_send(src, dst, payload)

                comm.send = spy
                transpose(src_lay.scatter(g), src_lay, dst_lay, comm)
                for r, p in peers.items():
                    assert len(p) <= max(r1, r2) - 1

    def test_mismatched_layouts_rejected(self):
        a = z_pencils((8, 8, 8), (1, 1))
        b = x_pencils((4, 4, 4), (1, 1))
        with pytest.raises(ContractError):
            transpose(a.scatter(random_grid(8)), a, b, Communicator(1))


class TestForward:
    def test_constant_field_dc_only(self):
        c = 3.25
        f = PencilFFT(8)
        spec = f.forward(np.full((8, 8, 8), c))
        assert spec[0, 0, 0] == pytest.approx(c * 512, rel=1e-13)
        spec[0, 0, 0] = 0
        assert np.max(np.abs(spec)) < 1e-10 * c * 512

    def test_single_cosine_two_coefficients(self):
        n = 8
        x = np.arange(n)
        grid = np.broadcast_to(np.cos(2 * np.pi * x / n)[:, None, None], (n, n, n)).copy()
        spec = PencilFFT(n).forward(grid)
        expected = np.zeros((n, n, n), dtype=complex)
        expected[1, 0, 0] = expected[-1, 0, 0] = n ** 3 / n * (n / 2)  # == 256
        assert np.max(np.abs(spec - expected)) < 1e-10 * n ** 3

    @pytest.mark.parametrize("n", [8, 12])
    def test_matches_direct_dft_oracle(self, n):
        g = random_grid(n, 11)
        spec = PencilFFT(n, rank_grid=(2, 2)).forward(g)
        oracle = dft3_direct(g)
        assert np.max(np.abs(spec - oracle)) <= 1e-10 * np.linalg.norm(g)

    def test_shape_contract(self):
        with pytest.raises(ContractError):
            PencilFFT(8).forward(np.zeros((4, 4, 4)))
        with pytest.raises(ContractError):
            PencilFFT(8).forward(np.full((8, 8, 8), np.nan))


class TestInverse:
    def test_roundtrip_unnormalized(self):
        g = random_grid(16, 13)
        f = PencilFFT(16)
        back = f.inverse(f.forward(g))
        assert np.max(np.abs(back - 16 ** 3 * g)) <= 1e-12 * 16 ** 3 * np.max(np.abs(g))

    def test_dc_spike_gives_constant(self):
        n = 8
        spec = np.zeros((n, n, n), dtype=complex)
        spec[0, 0, 0] = 7.0
        out = PencilFFT(n).inverse(spec)
        assert np.max(np.abs(out - 7.0)) < 1e-12

    def test_non_hermitian_rejected(self):
        n = 8
        spec = np.zeros((n, n, n), dtype=complex)
        spec[1, 2, 3] = 1.0 + 2.0j  # mirror mode missing
        with pytest.raises(ContractError):
            PencilFFT(n).inverse(spec)

    @pytest.mark.parametrize("rank_grid", RANK_GRIDS[1:])
    def test_rank_grid_independence(self, rank_grid):
        g = random_grid(8, 17)
        ref = PencilFFT(8, rank_grid=(1, 1)).forward(g)
        alt = PencilFFT(8, rank_grid=rank_grid).forward(g)
        assert np.max(np.abs(alt - ref)) <= 1e-13 * np.max(np.abs(ref))
        back_ref = PencilFFT(8, rank_grid=(1, 1)).inverse(ref)
        back_alt = PencilFFT(8, rank_grid=rank_grid).inverse(ref)
        assert np.max(np.abs(back_alt - back_ref)) <= 1e-13 * np.max(np.abs(back_ref))


class TestProperties:
    def test_parseval(self):
        g = random_grid(12, 19)
        spec = PencilFFT(12).forward(g)
        lhs = np.sum(g ** 2)
        rhs = np.sum(np.abs(spec) ** 2) / 12 ** 3
        assert abs(lhs - rhs) <= 1e-10 * lhs

    def test_linearity(self):
        rng = np.random.default_rng(23)
        x, y = rng.normal(size=(2, 8, 8, 8))
        f = PencilFFT(8)
        a, b = 1.7, -0.3
        lhs = f.forward(a * x + b * y)
        rhs = a * f.forward(x) + b * f.forward(y)
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * np.max(np.abs(lhs))

    def test_threaded_matches_serial_bitwise(self):
        g = random_grid(12, 29)
        serial = PencilFFT(12, rank_grid=(2, 2), n_threads=1).forward(g)
        threaded = PencilFFT(12, rank_grid=(2, 2), n_threads=4).forward(g)
        assert np.array_equal(serial, threaded)


class TestCommunicator:
    def test_fifo_per_pair(self):
        comm = Communicator(2)
        for i in range(5):
            comm.send(0, 1, i)
        assert [comm.recv(0, 1) for _ in range(5)] == list(range(5))

    def test_pairs_are_independent(self):
        comm = Communicator(3)
        comm.send(0, 2, "a")
        comm.send(1, 2, "b")
        assert comm.recv(1, 2) == "b"
        assert comm.recv(0, 2) == "a"

    def test_concurrent_send_recv(self):
        import threading

        comm = Communicator(2)
        out = []

        def consumer():
            for _ in range(100):
                out.append(comm.recv(0, 1))

        t = threading.Thread(target=consumer)
        t.start()
        for i in range(100):
            comm.send(0, 1, i)
        t.join()
        assert out == list(range(100))
