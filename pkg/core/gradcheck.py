import torch
from pydantic import BaseModel

from core.rng import philox
from core.trainer import backward


class GradCheckRow(BaseModel):
    name: str
    rel_error: float
    n_checked: int


def finite_difference_check(loss_fn, named_params, step=1e-4, max_entries=4, random_entries=4, seed=0, floor=1e-7):
    """
    Compara el gradiente de autograd con diferencias finitas centrales, tensor a tensor.

    En cada tensor se prueban las `max_entries` entradas de mayor gradiente absoluto y `random_entries` entradas
    más sorteadas entre las restantes. El error relativo es ||g_fd - g_ad|| / max(||g_ad||, ||g_fd||, floor) sobre
    todas las entradas probadas.

    Parámetros:
    - loss_fn (callable): Función sin argumentos que devuelve la pérdida escalar; debe ser determinista.
    - named_params (list[tuple[str, torch.Tensor]]): Parámetros a comprobar.
    - step (float): Paso h de las diferencias finitas.
    - max_entries (int): Entradas de mayor gradiente probadas por tensor.
    - random_entries (int): Entradas adicionales sorteadas por tensor.
    - seed (int): Semilla del sorteo (sub-flujo por nombre de tensor).
    - floor (float): Cota inferior del denominador para gradientes nulos.

    Retorna:
    - list[GradCheckRow]: Un resultado por tensor.
    """
    named_params = list(named_params)
    params = [p for _, p in named_params]
    analytic = [g.detach() for g in backward(loss_fn(), params)]

    rows = []
    with torch.no_grad():
        for (name, param), grad in zip(named_params, analytic):
            flat_grad = grad.reshape(-1)
            k = min(max_entries, flat_grad.numel())
            entries = torch.topk(flat_grad.abs(), k).indices.tolist()
            rest = sorted(set(range(flat_grad.numel())) - set(entries))
            n_random = min(random_entries, len(rest))
            if n_random:
                picked = philox(seed, "gradcheck", name).choice(len(rest), size=n_random, replace=False)
                entries += [rest[j] for j in picked]
            flat = param.data.view(-1)
            numeric, exact = [], []
            for i in entries:
                original = flat[i].item()
                flat[i] = original + step
                upper = loss_fn().item()
                flat[i] = original - step
                lower = loss_fn().item()
                flat[i] = original
                numeric.append((upper - lower) / (2 * step))
                exact.append(flat_grad[i].item())
            numeric = torch.tensor(numeric, dtype=torch.float64)
            exact = torch.tensor(exact, dtype=torch.float64)
            scale = max(numeric.norm().item(), exact.norm().item(), floor)
            rows.append(GradCheckRow(name=name, rel_error=(numeric - exact).norm().item() / scale,
                                     n_checked=len(entries)))
    return rows
