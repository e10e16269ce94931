import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from olora import tensor as T
from olora.adapters import AdapterStack, LoraAdapter, freeze_and_extend, init_adalora, init_lora
from olora.errors import ConfigError, DimensionError
from olora.gradcheck import toy_objective
from olora.regularizers import MODES, adalora_reg, combined_loss, orth_loss, total_orth_loss
from olora.tensor import Parameter, Tape, Tensor

E = np.eye(3)


def stack_of(*adapters):
    d1, d2 = adapters[0].d1, adapters[0].d2
    stack = AdapterStack(d1, d2)
    for ad in adapters:
        freeze_and_extend(stack, ad)
    return stack


def lora_with_A(A):
    A = np.asarray(A, dtype=float)
    return LoraAdapter(A=Parameter(A), B=Parameter(np.zeros((A.shape[1], A.shape[0]))))


class TestOrthLoss:
    def test_orthogonal_subspaces(self):
        assert orth_loss(Tensor(E[:, :2]), Tensor(E[:, 2:])).item() == 0.0

    def test_identical_basis(self):
        assert orth_loss(Tensor(E[:, :2]), Tensor(E[:, :2])).item() == 2.0

    def test_matches_composition(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            P, Q = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
            expected = T.frobenius_sq(T.matmul(T.transpose(Tensor(P)), Tensor(Q))).item()
            assert orth_loss(Tensor(P), Tensor(Q)).item() == expected

    def test_row_mismatch(self):
        with pytest.raises(DimensionError):
            orth_loss(Tensor(np.ones((3, 2))), Tensor(np.ones((4, 2))))

    @settings(max_examples=50)
    @given(arrays(np.float64, (5, 2), elements=st.floats(-10, 10)),
           arrays(np.float64, (5, 3), elements=st.floats(-10, 10)))
    def test_symmetric_and_matches_inner_product_loop(self, P, Q):
        pq = orth_loss(Tensor(P), Tensor(Q)).item()
        qp = orth_loss(Tensor(Q), Tensor(P)).item()
        loop = sum(float(np.dot(P[:, i], Q[:, j])) ** 2 for i in range(2) for j in range(3))
        assert pq >= 0.0
        assert abs(pq - qp) <= 1e-12 * max(1.0, pq)
        assert abs(pq - loop) <= 1e-9 * max(1.0, loop)

    def test_zero_exactly_on_orthogonal_columns(self):
        rng = np.random.default_rng(1)
        P = np.zeros((6, 2))
        Q = np.zeros((6, 3))
        P[:3] = rng.normal(size=(3, 2))
        Q[3:] = rng.normal(size=(3, 3))
        assert orth_loss(Tensor(P), Tensor(Q)).item() == 0.0


class TestTotalOrthLoss:
    def test_first_task_is_zero(self):
        assert total_orth_loss([stack_of(init_lora(6, 6, 2, 0))]).item() == 0.0

    def test_single_frozen_matches_single_call(self):
        a, b = init_lora(6, 6, 2, 0), init_lora(6, 6, 2, 1)
        expected = orth_loss(a.A, b.A).item()
        assert total_orth_loss([stack_of(a, b)]).item() == expected

    def test_brute_force_double_sum(self):
        rng = np.random.default_rng(2)
        stacks, expected = [], 0.0
        for _ in range(2):
            ads = [lora_with_A(rng.normal(size=(6, 2))) for _ in range(3)]
            stacks.append(stack_of(*ads))
            for past in ads[:2]:
                expected += ((past.A.data.T @ ads[2].A.data) ** 2).sum()
        assert total_orth_loss(stacks).item() == pytest.approx(expected, rel=1e-12)

    def test_frozen_gradients_stay_zero(self):
        rng = np.random.default_rng(3)
        ads = [lora_with_A(rng.normal(size=(5, 2))) for _ in range(3)]
        stack = stack_of(*ads)
        with Tape() as tape:
            tape.backward(total_orth_loss([stack]))
        for past in ads[:2]:
            np.testing.assert_array_equal(past.A.grad, 0.0)
        assert np.abs(ads[2].A.grad).sum() > 0

    def test_frozen_without_active_is_rejected(self):
        stack = stack_of(init_lora(4, 4, 1, 0), init_lora(4, 4, 1, 1))
        stack.active = None
        with pytest.raises(ConfigError):
            total_orth_loss([stack])


class TestAdaloraReg:
    def test_orthonormal_is_zero(self):
        Qm, _ = np.linalg.qr(np.random.default_rng(4).normal(size=(5, 5)))
        assert adalora_reg(Tensor(Qm[:, :3]), Tensor(Qm[:3, :])).item() < 1e-28

    def test_zeros(self):
        assert adalora_reg(Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 3)))).item() == 4.0

    def test_hand_gram(self):
        A = 2 * E[:, :2]
        B = E[:2, :]
        assert adalora_reg(Tensor(A), Tensor(B)).item() == 18.0

    def test_rank_mismatch(self):
        with pytest.raises(DimensionError):
            adalora_reg(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 3))))


class TestCombinedLoss:
    def test_lora_mode_is_task_loss(self):
        task = Tensor(0.75)
        out = combined_loss(task, [stack_of(init_lora(4, 4, 1, 0), init_lora(4, 4, 1, 1))], mode="lora")
        assert out.total == 0.75 and out.orth_loss == 0.0

    def test_o_lora_arithmetic(self):
        prev = lora_with_A([[np.sqrt(0.4)], [0.0]])
        new = lora_with_A([[1.0], [0.0]])
        out = combined_loss(Tensor(1.0), [stack_of(prev, new)], lambda1=0.5, mode="o_lora")
        assert out.orth_loss == pytest.approx(0.4, rel=1e-15)
        assert out.total == pytest.approx(1.2, rel=1e-15)

    def test_o_adalora_without_frozen(self):
        ad = init_adalora(6, 6, 3, 0)
        expected = 1.0 + 0.5 * adalora_reg(ad.A, ad.B).item()
        out = combined_loss(Tensor(1.0), [stack_of(ad)], lambda2=0.5, mode="o_adalora")
        assert out.orth_loss == 0.0
        assert out.total == pytest.approx(expected, rel=1e-15)

    @pytest.mark.parametrize("mode, adapter", [("adalora", init_lora), ("o_adalora", init_lora),
                                               ("o_lora", init_adalora)])
    def test_kind_mismatch(self, mode, adapter):
        with pytest.raises(ConfigError):
            combined_loss(Tensor(1.0), [stack_of(adapter(4, 4, 1, 0))], mode=mode)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            combined_loss(Tensor(1.0), [], mode="ewc")

    @pytest.mark.parametrize("mode", MODES)
    def test_gradient_check_per_mode(self, mode):
        f, params = toy_objective(mode)
        assert T.finite_diff_check(f, params) < 1e-4
