from app.router.base import ExperimentContext, ExperimentRouter
from app.router.fast_clt import router as fast_clt_router
from app.router.first_order import router as first_order_router
from app.router.liquidation import router as liquidation_router
from app.router.slow_clt import router as slow_clt_router

router = ExperimentRouter()

# 大数定律
router.include_router(first_order_router)

# 中心极限定理
router.include_router(fast_clt_router)
router.include_router(slow_clt_router)

# 应用
router.include_router(liquidation_router)

__all__ = ["ExperimentContext", "ExperimentRouter", "router"]
